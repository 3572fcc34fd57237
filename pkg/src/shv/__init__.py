"""shv: push-based HPC monitoring framework.

Pushers sample plugin sensors on epoch-aligned ticks and push batched
readings over a publish-only MQTT subset to collect agents, which map
topics to hierarchical sensor ids and write an embedded partitioned
time-series store.  Virtual sensors, a query library, operator CLIs and a
benchmark harness sit on top.
"""

__version__ = "0.1.0"
