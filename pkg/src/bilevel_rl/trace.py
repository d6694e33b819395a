"""CSV trace format.

Columns ``k,samples,phi,grad_norm,eps_theta,eps_theta_L,eps_V,eps_V_L,
x_0..x_{d-1},zeta,alpha,beta,w,tau``; reals use 17 significant digits so a
parse reproduces every value bit for bit.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .actor_critic import TraceRecord

HEAD = ("k", "samples", "phi", "grad_norm", "eps_theta", "eps_theta_L", "eps_V", "eps_V_L")
TAIL = ("zeta", "alpha", "beta", "w", "tau")


def header(dim_x: int) -> list[str]:
    return [*HEAD, *(f"x_{i}" for i in range(dim_x)), *TAIL]


def format_real(value: float) -> str:
    return format(float(value), ".17g")


def record_row(rec: TraceRecord) -> list[str]:
    reals = [rec.phi, rec.grad_norm, rec.eps_theta, rec.eps_theta_L, rec.eps_V, rec.eps_V_L,
             *rec.x, rec.zeta, rec.alpha, rec.beta, rec.w, rec.tau]
    return [str(int(rec.k)), str(int(rec.samples)), *(format_real(v) for v in reals)]


class TraceWriter:
    """Streams records to an open text file, flushing after every row."""

    def __init__(self, handle, dim_x: int):
        self.handle = handle
        self.writer = csv.writer(handle, lineterminator="\n")
        self.dim_x = dim_x
        self.writer.writerow(header(dim_x))
        handle.flush()

    def write(self, rec: TraceRecord):
        if len(rec.x) != self.dim_x:
            raise ValueError(f"record has {len(rec.x)} x entries, trace expects {self.dim_x}")
        self.writer.writerow(record_row(rec))
        self.handle.flush()


def emit_trace(records, dim_x: int | None = None) -> str:
    """The CSV text for ``records``; ``dim_x`` is needed only when there are none."""
    records = list(records)
    if dim_x is None:
        if not records:
            raise ValueError("dim_x is required for an empty trace")
        dim_x = len(records[0].x)
    buf = io.StringIO()
    w = TraceWriter(buf, dim_x)
    for rec in records:
        w.write(rec)
    return buf.getvalue()


def write_trace(path, records, dim_x: int | None = None) -> Path:
    path = Path(path)
    path.write_text(emit_trace(records, dim_x))
    return path


def parse_trace(source) -> list[TraceRecord]:
    """Parse CSV text or a path back into records."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        source = Path(source).read_text()
    rows = list(csv.reader(io.StringIO(source)))
    if not rows:
        raise ValueError("trace has no header")
    head = rows[0]
    dim_x = len(head) - len(HEAD) - len(TAIL)
    if dim_x < 0 or head != header(dim_x):
        raise ValueError(f"unexpected trace header {head}")
    out = []
    for n, row in enumerate(rows[1:], 2):
        if len(row) != len(head):
            raise ValueError(f"trace line {n} has {len(row)} fields, expected {len(head)}")
        reals = [float(v) for v in row[2:]]
        x = tuple(reals[6:6 + dim_x])
        out.append(TraceRecord(int(row[0]), int(row[1]), *reals[:6], x, *reals[6 + dim_x:]))
    return out
