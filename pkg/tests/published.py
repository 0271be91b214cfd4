"""Published comparison table: raw cells and the reported Rel Imp column.

Rows follow the scenario order. Each row holds, per task and training
condition, (baseline, joint, reported rel imp).
"""

from jointser.corpus import SCENARIOS

# scenario: {(task, trained_on): (baseline, joint, rel_imp)}
_ROWS = [
    # ASR clean           ASR noise             SER clean            SER noise
    ((16.8, 15.0, 10.7), (19.8, 15.6, 21.2), (71.9, 74.2, 2.3), (70.2, 71.7, 1.5)),
    ((22.2, 19.3, 13.1), (19.8, 18.4, 7.1), (69.8, 71.8, 2.0), (69.0, 70.6, 1.6)),
    ((33.6, 29.3, 12.8), (26.0, 25.8, 0.8), (62.0, 66.8, 4.8), (66.1, 68.7, 2.6)),
    ((21.7, 19.6, 9.9), (19.1, 18.3, 4.3), (68.8, 72.1, 3.3), (68.7, 71.1, 2.4)),
    ((37.4, 35.8, 4.3), (27.9, 29.2, -4.6), (60.8, 64.2, 3.4), (65.1, 68.4, 3.3)),
    ((36.9, 42.0, -13.8), (20.6, 22.4, -8.6), (66.7, 67.6, 0.9), (67.4, 70.0, 2.6)),
    ((74.6, 86.4, -15.8), (36.3, 51.3, -41.3), (53.3, 52.4, -0.9), (58.1, 62.3, 4.2)),
]
_COLUMNS = (("asr", "clean"), ("asr", "noise"), ("ser", "clean"), ("ser", "noise"))

TABLE = {
    sc: dict(zip(_COLUMNS, row)) for sc, row in zip(SCENARIOS, _ROWS)
}


def entries():
    """Yield (scenario, task, trained_on, baseline, joint, reported)."""
    for sc, cols in TABLE.items():
        for (task, on), (b, j, r) in cols.items():
            yield sc, task, on, b, j, r
