import csv
import io
import json

import numpy as np
import pytest

from bsqnn.bench import (
    EXIT_FAIL,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VERIFY,
    GEMM_COLUMNS,
    SweepSpec,
    UsageError,
    main,
    parse_dims,
    parse_wa,
    run_sweep,
    time_call,
)
from bsqnn.runtime import gops
from bsqnn.toy import write_toy_model


def test_parse_dims():
    assert parse_dims("64..4096") == (64, 128, 256, 512, 1024, 2048, 4096)
    assert parse_dims("64, 100") == (64, 100)
    assert parse_dims("256..256") == (256,)
    for bad in ("", "100..200", "128..64"):
        with pytest.raises(UsageError):
            parse_dims(bad)


def test_parse_wa():
    assert parse_wa("1x1,2X3") == ((1, 1), (2, 3))
    with pytest.raises(UsageError):
        parse_wa("2")


def test_default_sweep_covers_64_to_4096():
    s = SweepSpec()
    assert s.m == s.k == s.n == tuple(2 ** e for e in range(6, 13))
    assert s.repeat_seconds == 1.0 and s.seed == 42


@pytest.mark.parametrize("kw", [dict(m=()), dict(wa=((9, 1),)), dict(engines=("gpu",)),
                                dict(k=(100,)), dict(wordsize=16), dict(threads=0)])
def test_invalid_specs(kw):
    with pytest.raises(UsageError):
        SweepSpec(**kw).validate()


def test_spec_from_json(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"m": [64], "k": "64..128", "n": [32], "wa": [[2, 2]], "engines": "bsgemm"}))
    s = SweepSpec.from_json(p)
    assert (s.m, s.k, s.n, s.wa, s.engines) == ((64,), (64, 128), (32,), ((2, 2),), ("bsgemm",))
    p.write_text(json.dumps({"mm": 1}))
    with pytest.raises(UsageError):
        SweepSpec.from_json(p)


def test_gops_example():
    assert gops(256, 256, 256, 1e6) == pytest.approx(33.554432, abs=1e-12)


def test_time_call_counts_warmup_and_repeats():
    calls = []
    ns = time_call(lambda: calls.append(1), 0.0)
    assert len(calls) == 3 + 1 and ns > 0


def small_spec(**kw):
    base = dict(m=(32,), k=(64, 128, 256), n=(16,), wa=((1, 1), (2, 2)), repeat_seconds=0.0)
    base.update(kw)
    return SweepSpec(**base)


def test_sweep_csv_schema_and_gops_recomputation():
    buf = io.StringIO()
    run_sweep(small_spec(), buf)
    rows = list(csv.DictReader(io.StringIO(buf.getvalue())))
    assert tuple(rows[0].keys()) == GEMM_COLUMNS
    assert len(rows) == 3 * 2 * 2
    for r in rows:
        dims = int(r["M"]), int(r["K"]), int(r["N"])
        assert float(r["gops"]) == pytest.approx(gops(*dims, int(r["ns"])), abs=5e-7)
    # work (2*M*K*N) grows with K for fixed M, N
    work = [2 * int(r["M"]) * int(r["K"]) * int(r["N"])
            for r in rows if r["engine"] == "bsgemm" and r["w"] == "1"]
    assert work == sorted(work) and len(set(work)) == 3


def test_sweep_is_seeded():
    from bsqnn.bench import _operand
    a = _operand(np.random.default_rng(42), (4, 4), 3, True)
    b = _operand(np.random.default_rng(42), (4, 4), 3, True)
    assert np.array_equal(a, b)


def test_cli_gemm(capsys):
    code = main(["gemm", "--m", "16", "--k", "64", "--n", "8", "--wa", "2x2", "--repeat-seconds", "0"])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == ",".join(GEMM_COLUMNS) and len(lines) == 3


def test_cli_gemm_verification_failure_exit_3(capsys):
    code = main(["gemm", "--m", "16", "--k", "64", "--n", "8", "--wa", "2x2", "--signed",
                 "--repeat-seconds", "0", "--inject-fault", "sign-flip"])
    assert code == EXIT_VERIFY
    out = capsys.readouterr().out.strip().splitlines()
    assert out == [",".join(GEMM_COLUMNS)]  # no numbers from a wrong kernel


@pytest.mark.parametrize("argv", [["gemm", "--k", "100", "--engines", "bsgemm"], ["gemm", "--wa", "x"],
                                  ["gemm", "--spec", "/no/such.json"], ["frobnicate"],
                                  ["net", "--model", "/no/such.model", "--engine", "bsgemm"],
                                  ["net", "--model", "x", "--engine", "turbo"]])
def test_cli_usage_errors_exit_2(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().err


def test_cli_net_toy_all_engines(tmp_path, capsys):
    model = write_toy_model(tmp_path)
    hashes = set()
    for engine in ("baseline", "bsgemm", "bsgemm-intl"):
        assert main(["net", "--model", str(model), "--engine", engine, "--repeats", "2"]) == EXIT_OK
        cap = capsys.readouterr()
        rows = list(csv.DictReader(io.StringIO(cap.out)))
        assert rows[0]["layer"] == "conv1"
        hashes.update(l.split()[1] for l in cap.err.splitlines() if l.startswith("output_hash"))
    assert len(hashes) == 1


def test_cli_net_bad_model(tmp_path, capsys):
    p = tmp_path / "bad.model"
    p.write_text("[input]\nshape = 4 4 1\n[conv c]\nweights = gone.bsqw\nkernel = 3 3\n")
    assert main(["net", "--model", str(p), "--engine", "bsgemm"]) == EXIT_USAGE
    assert "bad.model:4" in capsys.readouterr().err


def test_cli_verify_pass_and_injected_fault(capsys):
    assert main(["verify", "--quick"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and "wordsize 32 vs 64" in out
    assert main(["verify", "--quick", "--inject-fault", "sign-flip"]) == EXIT_FAIL
    out = capsys.readouterr().out
    assert "FAIL gemm" in out and "W=" in out
