"""A small poison x countermeasure matrix through the harness.

The same table the ``iss matrix`` command produces, on a 2000/1000 split with
one seed so it finishes in about four minutes on one core.  Compare each
row's ``identity`` column (no countermeasure) with the squeezed columns.

    python demos/04_matrix.py [report.json]
"""
import sys

from iss import harness

from _data import full_splits

common = dict(countermeasures=("identity", "gray", "jpeg:10"), seeds=(0,), train_count=2000,
              test_count=1000)
specs = [harness.ExperimentSpec(poison=p, **common) for p in ("none", "lsp", "ar", "ops", "em", "tap")]
report = harness.run_matrix(specs, *full_splits())
print(report.to_csv(), end="")
if len(sys.argv) > 1:
    with open(sys.argv[1], "w") as f:
        f.write(report.to_json())
