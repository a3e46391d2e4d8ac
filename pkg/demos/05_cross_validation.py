"""Patient-grouped folds.

Slides from one patient share tissue and batch effects, so they must never
be split between training and test.  Leave-one-patient-out gives one fold per
patient; grouped k-fold balances slide counts over k folds.
"""
from triplex.evaluation import make_grouped_kfold, make_lopcv_folds

slides = [
    ("A1", "alice"), ("A2", "alice"), ("A3", "alice"),
    ("B1", "bob"),
    ("C1", "carol"), ("C2", "carol"),
    ("D1", "dan"), ("D2", "dan"),
]

print("leave-one-patient-out:")
for f in make_lopcv_folds(slides):
    print(f"  fold {f.fold_id}: test {f.test}  patients {sorted(f.test_patients)}")

print("grouped 2-fold:")
for f in make_grouped_kfold(slides, 2, seed=0):
    print(f"  fold {f.fold_id}: test {f.test} ({len(f.test)} slides)")

# with k equal to the number of patients the two schemes coincide
same = [(f.train, f.test) for f in make_grouped_kfold(slides, 4)] == [(f.train, f.test) for f in make_lopcv_folds(slides)]
print("k = patients reproduces LOPCV:", same)
