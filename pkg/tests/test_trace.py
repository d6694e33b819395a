import io
import math

import numpy as np
import pytest

from bilevel_rl.actor_critic import TraceRecord
from bilevel_rl.trace import TraceWriter, emit_trace, format_real, header, parse_trace, write_trace
from bilevel_rl.verify import CHECKS


def record(k=3, x=(0.1, 2.0 / 3.0), phi=-959.5):
    return TraceRecord(k, 2 * k, phi, 1e-300, math.pi, 1 / 3, 0.0, 5e-324, x, 0.5, 0.25, 1.0, 0.1, 7.0)


def test_header():
    assert header(2) == ["k", "samples", "phi", "grad_norm", "eps_theta", "eps_theta_L", "eps_V", "eps_V_L",
                         "x_0", "x_1", "zeta", "alpha", "beta", "w", "tau"]
    assert len(header(0)) == 13


def test_seventeen_significant_digits():
    assert format_real(1 / 3) == "0.33333333333333331"
    assert format_real(0.1) == "0.10000000000000001"
    assert format_real(2.0) == "2"
    for v in np.random.default_rng(0).normal(size=200) * 10.0 ** np.random.default_rng(1).integers(-30, 30, 200):
        assert float(format_real(v)) == v


def test_round_trip_is_bit_exact():
    recs = [record(k, (np.float64(k) / 7, -k * 1e-17)) for k in range(5)]
    assert parse_trace(emit_trace(recs)) == recs


def test_non_finite_values_round_trip():
    rec = record(phi=math.inf)
    back = parse_trace(emit_trace([rec, record(phi=math.nan)]))
    assert back[0] == rec and math.isnan(back[1].phi)


def test_empty_trace_needs_dim():
    with pytest.raises(ValueError, match="dim_x"):
        emit_trace([])
    text = emit_trace([], dim_x=3)
    assert text == ",".join(header(3)) + "\n"
    assert parse_trace(text) == []


def test_write_and_parse_path(tmp_path):
    path = write_trace(tmp_path / "t.csv", [record()])
    assert parse_trace(path) == [record()]
    assert parse_trace(str(path)) == [record()]


@pytest.mark.parametrize("text,needle", [
    ("\n", "header"),
    ("k,samples,phi\n1,2,3\n", "unexpected trace header"),
    (",".join(header(1)).replace("tau", "temp") + "\n", "unexpected trace header"),
    (",".join(header(1)) + "\n1,2,3\n", "line 2 has 3 fields"),
])
def test_malformed_rejected(text, needle):
    with pytest.raises(ValueError, match=needle):
        parse_trace(text)


def test_writer_streams_and_checks_dimension():
    class Handle(io.StringIO):
        flushes = 0

        def flush(self):
            self.flushes += 1
            super().flush()

    buf = Handle()
    w = TraceWriter(buf, 2)
    assert buf.getvalue().count("\n") == 1 and buf.flushes == 1
    w.write(record())
    assert buf.getvalue().count("\n") == 2 and buf.flushes == 2
    with pytest.raises(ValueError, match="expects 2"):
        w.write(record(x=(1.0,)))


@pytest.mark.parametrize("name", [n for n in CHECKS if n.startswith("harness.")])
def test_harness_invariants(name):
    passed, detail = CHECKS[name].fn()
    assert passed, detail
