import io
import subprocess
import sys

import pytest

from shv import cli

S = 10 ** 9
TOPIC = "/r1/c1/n1/power"


def run(*argv, stdin=None):
    out, err = io.StringIO(), io.StringIO()
    code = cli.dispatch(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def root(tmp_path, monkeypatch):
    r = str(tmp_path / "store")
    monkeypatch.setenv("SHV_STORE", r)
    return r


@pytest.fixture
def two_watts(root, tmp_path):
    path = tmp_path / "in.csv"
    rows = "".join(f"{TOPIC},{(k + 1) * S},4\n" for k in range(11))
    path.write_text("sensor,timestamp,value\n" + rows)
    assert run("config", "sensor", "set", TOPIC, "--unit", "W", "--scale", "0.5") == (0, "", "")
    assert run("csvimport", str(path)) == (0, "11\n", "")
    return root


def test_integral_golden(two_watts):
    assert run("query", TOPIC, "0", str(100 * S), "--integral") == (0, "20 J\n", "")


def test_query_outputs(two_watts):
    assert run("query", TOPIC, str(S), str(3 * S)) == (0, f"{S} 2\n{2 * S} 2\n", "")
    assert run("query", TOPIC, str(S), str(2 * S), "--raw") == (0, f"{S} 4\n", "")
    assert run("query", TOPIC, "1970-01-01T00:00:01Z", "1970-01-01T00:00:03.5+00:00", "--csv") == (
        0, f"sensor,timestamp,value\n{TOPIC},{S},2\n{TOPIC},{2 * S},2\n{TOPIC},{3 * S},2\n", "")
    assert run("query", TOPIC, str(S), str(3 * S), "--derivative") == (0, f"{2 * S} 0\n", "")
    assert run("query", TOPIC, "0", "1")[:2] == (0, "")


def test_sensor_show(two_watts):
    code, out, err = run("config", "sensor", "show", TOPIC)
    assert code == 0 and err == ""
    assert out == f"sensor {TOPIC} {{\n    unit W\n    scale 0.5\n    interval 1000\n    ttl 0\n}}\n"
    assert run("config", "sensor", "show", "/none")[0] == 2


def test_vsensor_define_list_and_cycle(two_watts):
    assert run("config", "vsensor", "define", "/v/x", "<\\/a>+<\\/a>", "", "1000")[0] == 2  # unknown operand
    assert run("config", "vsensor", "define", "/v/x", f"<{TOPIC}>*2", "W", "1000", "--scale", "1e-6") == (0, "", "")
    code, out, err = run("config", "vsensor", "list")
    assert code == 0 and out.startswith(f"vsensor /v/x {{\n    expr <{TOPIC}>*2\n    unit W\n")
    code, out, err = run("config", "vsensor", "define", "/v/x", "<\\/v\\/x>", "", "1000")
    assert (code, out) == (2, "")
    assert err == "shv-config: error: cycle detected: /v/x -> /v/x\n"
    assert run("query", "/v/x", str(S), str(3 * S)) == (0, f"{S} 4\n{2 * S} 4\n", "")


def test_spec_cycle_example(root):
    import shv.storage

    store = shv.storage.Store.open(root)
    store.sid_of("/a", register=True)
    store.close()
    assert run("config", "vsensor", "define", "/v/x", "<\\/a>+<\\/a>", "", "1000")[0] == 0
    code, out, err = run("config", "vsensor", "define", "/v/x", "<\\/v\\/x>+<\\/a>", "", "1000")
    assert code == 2 and out == "" and "cycle detected" in err


def test_retention_verbs(two_watts):
    assert run("config", "db", "deleteold", str(5 * S)) == (0, "4\n", "")
    assert run("config", "db", "compact") == (0, "", "")
    assert run("config", "sensor", "set", TOPIC, "--ttl", "3000") == (0, "", "")
    assert run("config", "db", "applyttl", str(10 * S)) == (0, "2\n", "")
    assert run("query", TOPIC, "0", str(100 * S), "--raw")[1].split("\n")[0] == f"{7 * S} 4"


def test_usage_errors(root):
    code, out, err = run("query")
    assert code == 1 and out == "" and "usage: shv-query" in err
    assert run()[0] == 1
    assert run("nosuchtool")[0] == 1
    assert run("config")[0] == 1
    assert run("query", TOPIC, "zero", "1")[0] == 1
    assert run("query", TOPIC, "5", "1", "--raw", "--integral")[0] == 1
    assert run("query", TOPIC, "5", "1")[0] == 1


def test_runtime_errors(root, tmp_path, monkeypatch):
    code, out, err = run("query", TOPIC, "0", "1")
    assert (code, out) == (2, "") and "no store" in err
    run("config", "sensor", "set", "/a")
    assert run("query", "/nope", "0", "1") == (2, "", "shv-query: error: unknown sensor /nope\n")
    assert run("query", "/a", "0", "1", "--integral")[0] == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("sensor,timestamp,value\na,b,c\n")
    assert run("csvimport", str(bad)) == (2, "", "shv-csvimport: error: bad row 2: topic must start with '/': 'a'\n")
    assert run("csvimport", str(tmp_path / "missing.csv"))[0] == 2
    monkeypatch.delenv("SHV_STORE")
    assert run("query", TOPIC, "0", "1")[0] == 1


def test_store_flag(tmp_path):
    r = str(tmp_path / "s")
    assert run("config", "--store", r, "sensor", "set", "/a", "--unit", "kW")[0] == 0
    assert run("config", "sensor", "show", "--store", r)[1].startswith("sensor /a {\n    unit kW\n")


@pytest.mark.parametrize("text, ns", [
    ("0", 0),
    ("1700000000123456789", 1700000000123456789),
    ("1970-01-01T00:00:00Z", 0),
    ("1970-01-01T00:00:01.5Z", 1_500_000_000),
    ("1970-01-01T01:00:00+01:00", 0),
    ("1969-12-31T23:00:00-01:00", 0),
    ("2024-02-29T12:00:00.000000001Z", 1709208000000000001),
])
def test_parse_timestamp(text, ns):
    assert cli.parse_timestamp(text) == ns


@pytest.mark.parametrize("text", ["x", "2024-13-01T00:00:00Z", "2024-01-01", "2024-02-30T00:00:00Z"])
def test_parse_timestamp_rejects(text):
    with pytest.raises(Exception):
        cli.parse_timestamp(text)


def test_bench_verbs(tmp_path):
    assert run("bench", "predict", "1000", "0.005", "10000", "0.03", "5500") == (0, "0.0175\n", "")
    assert run("bench", "predict", "1000", "0.005", "10000", "0.03", "1000") == (0, "0.005\n", "")
    assert run("bench", "predict", "1", "0", "1", "0", "1")[0] == 2
    assert run("bench", "overhead", "100", "102") == (0, "0.02\n", "")
    assert run("bench", "overhead", "100", "99") == (0, "-0.01\n", "")
    f = tmp_path / "pts.csv"
    f.write_text("rate,load\n100,0.002\n1000,0.011\n10000,0.101\n")
    code, out, _ = run("bench", "fit", str(f))
    assert code == 0 and out.startswith("slope 1e-05\nintercept 0.001\nr2 1")
    f.write_text("rate,load\n100,0.1\n100,0.2\n")
    assert run("bench", "fit", str(f))[0] == 2


def test_console_script():
    proc = subprocess.run([sys.executable, "-c", "from shv.cli import query_main; query_main()"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stdout == "" and "usage: shv-query" in proc.stderr
