"""Seeded synthetic heart-disease data in the raw UCI processed-file format.

For environments without the published site files, this generator produces
drop-in stand-ins with the same shape: four site files of 303, 294, 123 and
200 rows, 14 columns, "?" missing markers (the cleveland file carries
exactly four missing `ca` cells and two missing `thal` cells on six distinct
rows), and class-conditional feature distributions strong enough to train
against. Output is a pure function of (seed, signal).
"""

import argparse
from pathlib import Path

import numpy as np

from . import seeding
from .data import HEART_SCHEMA, RecordTable

SITE_ROWS = {"cleveland": 303, "hungarian": 294, "switzerland": 123, "va": 200}

# site -> (disease prevalence, age shift, max-heart-rate shift)
_SITE_PROFILE = {
    "cleveland": (0.46, 0.0, 0.0),
    "hungarian": (0.38, -4.0, 3.0),
    "switzerland": (0.60, 2.0, -5.0),
    "va": (0.56, 3.0, -3.0),
}

# numeric feature -> (healthy mean, diseased mean, std, low, high, decimals)
_NUMERIC = {
    "age": (52.5, 56.5, 9.0, 29, 77, 0),
    "trestbps": (129.0, 134.5, 17.0, 94, 200, 0),
    "chol": (243.0, 251.0, 50.0, 126, 564, 0),
    "thalach": (158.0, 139.0, 21.0, 71, 202, 0),
    "oldpeak": (0.6, 1.65, 1.0, 0.0, 6.2, 1),
}

# categorical feature -> levels, healthy probs, diseased probs
_CATEGORICAL = {
    "cp": ((1, 2, 3, 4), (0.10, 0.27, 0.38, 0.25), (0.04, 0.07, 0.12, 0.77)),
    "restecg": ((0, 1, 2), (0.55, 0.05, 0.40), (0.38, 0.07, 0.55)),
    "slope": ((1, 2, 3), (0.62, 0.33, 0.05), (0.22, 0.62, 0.16)),
    "ca": ((0, 1, 2, 3), (0.73, 0.16, 0.08, 0.03), (0.27, 0.29, 0.26, 0.18)),
    "thal": ((3, 6, 7), (0.79, 0.06, 0.15), (0.40, 0.11, 0.49)),
}

# binary feature -> (healthy rate, diseased rate)
_BINARY = {"sex": (0.58, 0.77), "fbs": (0.13, 0.17), "exang": (0.14, 0.55)}

_GRADE_PROBS = (0.50, 0.32, 0.12, 0.06)  # disease grades 1..4

# per-site missing-cell rates for the non-cleveland sites
_MISSING_RATES = {
    "hungarian": {"slope": 0.25, "ca": 0.55, "thal": 0.35, "chol": 0.06},
    "switzerland": {"slope": 0.12, "ca": 0.45, "thal": 0.12, "fbs": 0.30},
    "va": {"slope": 0.30, "ca": 0.50, "thal": 0.40, "chol": 0.02},
}

_SYNTH_STREAM = 91


def _blend(healthy, diseased, signal: float):
    h = np.asarray(healthy, dtype=np.float64)
    d = np.asarray(diseased, dtype=np.float64)
    mixed = h + signal * (d - h)
    if mixed.ndim:
        mixed = np.clip(mixed, 1e-6, None)
        mixed /= mixed.sum()
    return mixed


def _draw_row(rng: np.random.Generator, diseased: bool, signal: float,
              age_shift: float, thalach_shift: float) -> list[float]:
    row: list[float] = []
    for col in HEART_SCHEMA:
        name = col.name
        if name in _NUMERIC:
            mu0, mu1, sd, lo, hi, decimals = _NUMERIC[name]
            mu = mu0 + signal * (mu1 - mu0) if diseased else mu0
            if name == "age":
                mu += age_shift
            elif name == "thalach":
                mu += thalach_shift
            value = rng.normal(mu, sd)
            if name == "oldpeak":
                value = abs(value)
            value = float(np.clip(value, lo, hi))
            row.append(round(value, decimals))
        elif name in _CATEGORICAL:
            levels, p_h, p_d = _CATEGORICAL[name]
            probs = _blend(p_h, p_d, signal) if diseased else np.asarray(p_h)
            probs = probs / probs.sum()
            row.append(float(rng.choice(levels, p=probs)))
        elif name in _BINARY:
            r_h, r_d = _BINARY[name]
            rate = r_h + signal * (r_d - r_h) if diseased else r_h
            row.append(float(rng.random() < rate))
        elif name == "num":
            if diseased:
                row.append(float(rng.choice((1, 2, 3, 4), p=_GRADE_PROBS)))
            else:
                row.append(0.0)
        else:  # pragma: no cover - schema is fixed
            raise AssertionError(name)
    return row


def _row_key(row: list[float]) -> tuple:
    return tuple(row)


def generate_site(site: str, seed: int, signal: float = 1.0,
                  taken: set | None = None) -> RecordTable:
    """One site's table; `taken` enforces global row uniqueness across sites."""
    if site not in SITE_ROWS:
        raise ValueError(f"unknown site {site!r}")
    n_rows = SITE_ROWS[site]
    prevalence, age_shift, thalach_shift = _SITE_PROFILE[site]
    site_index = sorted(SITE_ROWS).index(site)
    rng = seeding.stream(seed, _SYNTH_STREAM, site_index)
    taken = taken if taken is not None else set()
    chol_idx = next(i for i, c in enumerate(HEART_SCHEMA) if c.name == "chol")
    rows = []
    for _ in range(n_rows):
        diseased = rng.random() < prevalence
        row = _draw_row(rng, diseased, signal, age_shift, thalach_shift)
        while _row_key(row) in taken:  # nudge collisions into uniqueness
            row[chol_idx] = float(row[chol_idx] + 1.0)
        taken.add(_row_key(row))
        rows.append(row)
    # Missing cells: cleveland reproduces the published pattern exactly
    # (4 missing ca + 2 missing thal on six distinct rows).
    if site == "cleveland":
        ca = next(i for i, c in enumerate(HEART_SCHEMA) if c.name == "ca")
        thal = next(i for i, c in enumerate(HEART_SCHEMA) if c.name == "thal")
        marked = rng.choice(n_rows, size=6, replace=False)
        for i in marked[:4]:
            rows[i][ca] = None
        for i in marked[4:]:
            rows[i][thal] = None
    else:
        name_to_idx = {c.name: i for i, c in enumerate(HEART_SCHEMA)}
        for col_name, rate in _MISSING_RATES[site].items():
            j = name_to_idx[col_name]
            mask = rng.random(n_rows) < rate
            if mask.all():
                mask[0] = False  # every column keeps at least one observation
            for i in np.flatnonzero(mask):
                rows[i][j] = None
    return RecordTable(schema=HEART_SCHEMA, rows=rows, source_tag=site)


def _format_cell(cell, col) -> str:
    if cell is None:
        return "?"
    if col.name == "num":
        return str(int(cell))
    return f"{cell:.1f}"


def write_processed_file(table: RecordTable, path: Path) -> None:
    """Raw UCI convention: no header, comma-separated, "?" missing."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in table.rows:
            fh.write(",".join(_format_cell(c, col)
                              for c, col in zip(row, table.schema)) + "\n")


def generate_all(out_dir, seed: int = 7, signal: float = 1.0) -> dict[str, Path]:
    """Writes processed.<site>.data for all four sites; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    taken: set = set()
    paths = {}
    for site in ("cleveland", "hungarian", "switzerland", "va"):
        table = generate_site(site, seed, signal, taken)
        path = out_dir / f"processed.{site}.data"
        write_processed_file(table, path)
        paths[site] = path
    return paths


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="generate synthetic heart-disease site files"
    )
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--signal", type=float, default=1.0,
                        help="class separation strength (1.0 = default)")
    args = parser.parse_args(argv)
    paths = generate_all(args.out, args.seed, args.signal)
    for site, path in sorted(paths.items()):
        print(f"{site}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
