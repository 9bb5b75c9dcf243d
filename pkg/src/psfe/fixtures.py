"""Canonical demo datasets: a four-patient clinical table and variants
used by the attack demos and the privacy-ratio experiment.
"""

from __future__ import annotations

from .dataset import PlainDataset, Variable, VariableKind

_CAT = VariableKind.CATEGORICAL
_ORD = VariableKind.ORDINAL
_NUM = VariableKind.NUMERICAL


def clinical_fixture() -> PlainDataset:
    """Four cases, five variables; the running example everywhere."""
    return PlainDataset(
        schema=(
            Variable("Diagnosis", _CAT),
            Variable("Condition", _ORD),
            Variable("Age", _NUM, 0, 120),
            Variable("sbp", _NUM, 0, 200),
            Variable("dbp", _NUM, 0, 120),
        ),
        rows=(
            ("covid19", "mild", 27, 110, 75),
            ("flu", "severe", 58, 123, 60),
            ("flu", "mild", 41, 120, 80),
            ("pneumonia", "critical", 65, 149, 58),
        ),
    )


def cohort_fixture() -> PlainDataset:
    """Clinical fixture plus cohort columns so demo queries can select
    "the first three cases" ("early") and "all cases" ("central")."""
    base = clinical_fixture()
    schema = base.schema + (
        Variable("Batch", _CAT),
        Variable("Clinic", _CAT),
    )
    batches = ("early", "early", "early", "late")
    rows = tuple(
        row + (batch, "central") for row, batch in zip(base.rows, batches)
    )
    return PlainDataset(schema=schema, rows=rows)


def neighbouring_pair() -> tuple[PlainDataset, PlainDataset]:
    """Two datasets differing in one record, for the privacy-ratio experiment.

    Both carry a unit-valued "cases" column (range [0, 1], sensitivity 1),
    so summing it over the rows matching a term is a count query. The
    second dataset changes one diagnosis from flu to pneumonia: the flu
    count drops from 2 to 1.
    """
    base = clinical_fixture()
    schema = base.schema + (Variable("cases", _NUM, 0, 1),)
    rows_a = tuple(row + (1,) for row in base.rows)
    rows_b = tuple(
        (("pneumonia",) + row[1:] if row[0] == "flu" and row[2] == 41 else row)
        for row in rows_a
    )
    return (
        PlainDataset(schema=schema, rows=rows_a),
        PlainDataset(schema=schema, rows=rows_b),
    )


def plaintext_aggregate(
    ds: PlainDataset, value_term: str, variable_name: str
) -> tuple[int, int]:
    """Brute-force (sum, count) oracle: filter rows by term, sum the column."""
    column = next(i for i, v in enumerate(ds.schema) if v.name == variable_name)
    total = 0
    count = 0
    for row in ds.rows:
        if any(
            isinstance(cell, str) and cell == value_term for cell in row
        ):
            total += row[column]
            count += 1
    return total, count
