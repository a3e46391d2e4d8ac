"""Acceptance suite: one test per criterion, each at its stated tolerance and
wall-clock budget.  Every test appends a PASS/FAIL line that pytest prints in
an "acceptance criteria" section at the end of the run (see conftest.py).

Run just this file with ``pytest tests/test_acceptance.py -v``.
"""
import itertools
import math
import subprocess
import sys
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from triplex.config import RunConfig
from triplex.encoders import EncoderConfig, GridCoordinates, apeg
from triplex.evaluation import aggregate_metrics, make_grouped_kfold, make_lopcv_folds, slide_metrics
from triplex.fusion import fusion_loss
from triplex.model import TriplexModel
from triplex.pipeline import split_validation, train_model
from triplex.synthetic import make_cohort, write_toy_dataset
from triplex.tensor import Tensor, default_dtype, grad_check, is_grad_enabled, no_grad
from triplex.training import dataset_loss, lr_schedule


def record(verdicts, name, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}; {elapsed:.1f}s of {budget:.0f}s"
    verdicts.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------- gradient integrity

TOY = EncoderConfig(
    d=16, d_in=16, depth1=1, depth2=1, depth3=1, num_heads1=2, num_heads2=2, num_heads3=2,
    mlp_ratio1=1.0, mlp_ratio2=1.0, mlp_ratio3=1.0, dropout1=0.0, dropout2=0.0, dropout3=0.0,
)


BRANCHES = ("target_encoder", "neighbor_encoder", "global_encoder", None)


def toy_objective(model, branch, seed=0, alpha=0.5):
    """Total training loss of a 6-spot slide on a 3x3 grid, as a function of the weights.

    The analytic pass runs the full model with the training loss (soft target
    detached).  The perturbed passes hold the soft target at its base-point
    value, which is the function whose gradient the detached loss reports.
    They also reuse base-point outputs of the encoders other than ``branch``,
    which do not depend on the weights being perturbed (``None`` caches all
    three and perturbs fusion and heads).
    """
    rng = np.random.default_rng(seed)
    n, dt, din = 6, model.dtype, model.cfg.d_in
    cells = np.sort(rng.permutation(9)[:n])
    coords = GridCoordinates(np.stack(np.divmod(cells, 3), axis=1))
    xt = Tensor(rng.normal(size=(n, 49, din)).astype(dt))
    xn = Tensor(rng.normal(size=(n, 25, din)).astype(dt))
    xg = Tensor(rng.normal(size=(n, din)).astype(dt))
    y = rng.normal(size=(n, model.m)).astype(dt)
    encode = {
        "target_encoder": lambda: model.target_encoder(xt),
        "neighbor_encoder": lambda: model.neighbor_encoder(xn),
        "global_encoder": lambda: model.global_encoder(xg, coords),
    }

    def head_outputs(z):
        out = model.fusion(z["global_encoder"], z["target_encoder"], z["neighbor_encoder"])
        return model.heads(z["target_encoder"], z["neighbor_encoder"], z["global_encoder"], out.z_gtn)

    with no_grad():
        cached = {k: Tensor(e().data.copy()) for k, e in encode.items()}
        frozen = Tensor(head_outputs(cached)[3].data.copy())
    yt = Tensor(y)

    def sq(a, b):
        diff = a - b
        return (diff * diff).mean()

    def f(_):
        if is_grad_enabled():
            return fusion_loss(*head_outputs({k: e() for k, e in encode.items()}), y, alpha).total
        z = dict(cached)
        if branch is not None:
            z[branch] = encode[branch]()
        q_ta, q_ne, q_gl, q_f = head_outputs(z)
        total = sq(q_f, yt)
        for q in (q_ta, q_ne, q_gl):
            total = total + sq(q, yt) * (1 - alpha) + sq(q, frozen) * alpha
        return total

    return f


def branch_parameters(model, branch):
    if branch is not None:
        return getattr(model, branch).parameters()
    return model.fusion.parameters() + model.heads.parameters()


def test_gradient_integrity(verdicts):
    t0 = time.perf_counter()
    errs = {}
    for dt in (np.float32, np.float64):
        with default_dtype(dt), threadpool_limits(limits=1):
            model = TriplexModel(TOY, 4, seed=0)
            groups = [branch_parameters(model, b) for b in BRANCHES]
            assert sum(p.data.size for g in groups for p in g) == model.num_parameters()
            errs[dt] = max(grad_check(toy_objective(model, b), g) for b, g in zip(BRANCHES, groups))
    elapsed = time.perf_counter() - t0
    ok = errs[np.float32] < 1e-3 and errs[np.float64] < 1e-6
    n_params = TriplexModel(TOY, 4, seed=0).num_parameters()
    detail = f"{n_params} weights, max rel err 32-bit {errs[np.float32]:.2e} (< 1e-3), 64-bit {errs[np.float64]:.2e} (< 1e-6)"
    assert record(verdicts, "gradient integrity", ok, detail, elapsed, 60)


# ---------------------------------------------------------------- APEG oracle


def dense_apeg(tokens, occupied, kernel):
    """Scatter to an h x w grid, 3x3 'same' depthwise conv by shifted sums, re-zero voids, gather."""
    h, w = occupied.shape
    cells = np.argwhere(occupied)
    grid = np.zeros((h + 2, w + 2, tokens.shape[1]))
    grid[cells[:, 0] + 1, cells[:, 1] + 1] = tokens
    conv = np.zeros((h, w, tokens.shape[1]))
    for i in range(3):
        for j in range(3):
            conv += kernel[i, j] * grid[i : i + h, j : j + w]
    conv[~occupied] = 0.0
    return tokens + conv[cells[:, 0], cells[:, 1]]


def test_apeg_oracle_equivalence(verdicts):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst, patterns = 0.0, 0
    with default_dtype(np.float64):
        for h, w in itertools.product(range(1, 5), repeat=2):
            for mask in range(1, 2 ** (h * w)):
                occupied = np.array([(mask >> b) & 1 for b in range(h * w)], dtype=bool).reshape(h, w)
                cells = np.argwhere(occupied)
                tokens = rng.normal(size=(len(cells), 3))
                kernel = rng.normal(size=(3, 3, 3))
                # apeg sees only the spot coordinates, shifted to start at 0
                got = apeg(Tensor(tokens), GridCoordinates(cells - cells.min(axis=0)), Tensor(kernel)).data
                worst = max(worst, float(np.abs(got - dense_apeg(tokens, occupied, kernel)).max()))
                patterns += 1
    elapsed = time.perf_counter() - t0
    detail = f"{patterns} occupancy patterns on grids up to 4x4, max abs diff {worst:.1e} (<= 1e-6)"
    assert record(verdicts, "APEG oracle equivalence", worst <= 1e-6, detail, elapsed, 60)


# ---------------------------------------------------------------- fusion-loss identities


def mse_oracle(a, b):
    return math.fsum((x - y) ** 2 for x, y in zip(a.ravel().tolist(), b.ravel().tolist())) / a.size


def test_fusion_loss_identities(verdicts):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    decomposition_exact, alpha0_err, oracle_err = True, 0.0, 0.0
    with default_dtype(np.float64):
        for _ in range(1000):
            n, m = int(rng.integers(1, 6)), int(rng.integers(1, 9))
            q = [rng.normal(size=(n, m)) for _ in range(4)]
            y = rng.normal(size=(n, m))
            alpha = float(rng.uniform())
            parts = fusion_loss(*map(Tensor, q), y, alpha)
            L = parts.as_floats()
            decomposition_exact &= L["total"] == ((L["L_Ta"] + L["L_Ne"]) + L["L_Gl"]) + L["L_F"]
            for key, qj in zip(("L_Ta", "L_Ne", "L_Gl"), q[:3]):
                want = (1 - alpha) * mse_oracle(qj, y) + alpha * mse_oracle(qj, q[3])
                oracle_err = max(oracle_err, abs(L[key] - want))
            oracle_err = max(oracle_err, abs(L["L_F"] - mse_oracle(q[3], y)))
            zero = fusion_loss(*map(Tensor, q), y, 0.0).as_floats()
            for key, qj in zip(("L_Ta", "L_Ne", "L_Gl"), q[:3]):
                alpha0_err = max(alpha0_err, abs(zero[key] - mse_oracle(qj, y)))
        hand = fusion_loss(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0]]), Tensor([[1.0, 1.0]]),
                           np.zeros((1, 2)), 0.5).as_floats()
    hand_ok = hand["L_Ta"] == 0.5 and hand["L_F"] == 1.0
    elapsed = time.perf_counter() - t0
    ok = decomposition_exact and alpha0_err <= 1e-12 and oracle_err <= 1e-12 and hand_ok
    detail = (f"1000 instances, total == sum of parts exactly: {decomposition_exact}, alpha=0 err {alpha0_err:.1e} (<= 1e-12), "
              f"formula oracle err {oracle_err:.1e}, hand example L_Ta={hand['L_Ta']} L_F={hand['L_F']}")
    assert record(verdicts, "fusion-loss identities", ok, detail, elapsed, 10)


# ---------------------------------------------------------------- metric oracle


def pcc_oracle(a, b):
    n = len(a)
    ma, mb = math.fsum(a) / n, math.fsum(b) / n
    cov = math.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = math.fsum((x - ma) ** 2 for x in a)
    vb = math.fsum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def test_metric_oracle(verdicts):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        truth = rng.normal(size=(50, 20))
        pred = 0.6 * truth + rng.normal(size=(50, 20))
        sm = slide_metrics(pred, truth)
        flat_p, flat_t = pred.ravel().tolist(), truth.ravel().tolist()
        mse = math.fsum((p - t) ** 2 for p, t in zip(flat_p, flat_t)) / len(flat_p)
        mae = math.fsum(abs(p - t) for p, t in zip(flat_p, flat_t)) / len(flat_p)
        pcc = [pcc_oracle(pred[:, j].tolist(), truth[:, j].tolist()) for j in range(20)]
        worst = max(worst, abs(sm.mse - mse), abs(sm.mae - mae), float(np.abs(sm.pcc - pcc).max()))
    same = slide_metrics(truth, truth)
    identical_ok = bool(np.all(np.abs(same.pcc - 1.0) <= 1e-12)) and same.mse == 0.0 and same.mae == 0.0
    elapsed = time.perf_counter() - t0
    detail = f"100 pairs of 50x20, max diff vs formula oracle {worst:.1e} (<= 1e-10), identical inputs give PCC=1 MSE=MAE=0: {identical_ok}"
    assert record(verdicts, "metric oracle", worst <= 1e-10 and identical_ok, detail, elapsed, 10)


# ---------------------------------------------------------------- partitioner soundness


def random_structure(rng):
    patients = [f"pt{int(i):03d}" for i in rng.choice(1000, size=int(rng.integers(2, 13)), replace=False)]
    pairs = []
    for p in patients:
        for s in range(int(rng.integers(1, 5))):
            pairs.append((f"{p}_slide{s}_{int(rng.integers(1e6))}", p))
    rng.shuffle(pairs)
    return pairs


def fold_problems(folds, pairs):
    patient = dict(pairs)
    problems = []
    seen = []
    for f in folds:
        if set(f.train) & set(f.test):
            problems.append("slide in both train and test")
        if {patient[s] for s in f.train} & {patient[s] for s in f.test}:
            problems.append("patient leakage")
        if set(f.train) | set(f.test) != set(patient):
            problems.append("fold does not cover every slide")
        seen.extend(f.test)
    if sorted(seen) != sorted(patient):
        problems.append("test sets are not a disjoint cover")
    return problems


def test_partitioner_soundness(verdicts):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2021)
    bad = []
    for trial in range(1000):
        pairs = random_structure(rng)
        n_patients = len({p for _, p in pairs})
        lopcv = make_lopcv_folds(pairs)
        bad += [(trial, "lopcv", p) for p in fold_problems(lopcv, pairs)]
        if len(lopcv) != n_patients or any(len(f.test_patients) != 1 for f in lopcv):
            bad.append((trial, "lopcv", "not one patient per fold"))
        k = int(rng.integers(2, n_patients + 1))
        seed = int(rng.integers(1000))
        kfold = make_grouped_kfold(pairs, k, seed)
        bad += [(trial, f"kfold:{k}", p) for p in fold_problems(kfold, pairs)]
        if len(kfold) != k:
            bad.append((trial, f"kfold:{k}", "wrong fold count"))
        full = make_grouped_kfold(pairs, n_patients, seed)
        if [(f.train, f.test) for f in full] != [(f.train, f.test) for f in lopcv]:
            bad.append((trial, "kfold:P", "differs from lopcv"))
    elapsed = time.perf_counter() - t0
    detail = f"1000 random patient/slide structures, violations: {len(bad)}" + (f" (first {bad[0]})" if bad else "")
    assert record(verdicts, "partitioner soundness", not bad, detail, elapsed, 30)


# ---------------------------------------------------------------- learnability

# full default training config; encoder width reduced from 512 to 32 to fit the CPU budget
LEARN_CFG = RunConfig(encoder=EncoderConfig(d=32))


def test_learnability(verdicts):
    t0 = time.perf_counter()
    slides = make_cohort()
    by = {ds.slide_id: ds for ds in slides}
    cfg = LEARN_CFG
    ratios, reports, epochs = [], [], []
    limiter = threadpool_limits(limits=1)
    for fold in make_lopcv_folds(slides):
        train_slides = [by[s] for s in fold.train]
        fit_slides, _ = split_validation(cfg, train_slides)
        before = dataset_loss(TriplexModel(cfg.encoder, 16, seed=cfg.seed), fit_slides, cfg.train.alpha)["total"]
        model, result = train_model(cfg, train_slides)
        after = dataset_loss(model, fit_slides, cfg.train.alpha)["total"]
        ratios.append(before / after)
        epochs.append(len(result.history))
        reports += [slide_metrics(model.predict_slide(by[s]), by[s].expression, s) for s in fold.test]
    limiter.restore_original_limits()
    pcc_m = aggregate_metrics(reports).pcc_m
    elapsed = time.perf_counter() - t0
    ok = min(ratios) >= 10.0 and max(epochs) <= 200 and pcc_m >= 0.7
    detail = (f"4 LOPCV folds, training-loss reduction per fold {', '.join(f'{r:.1f}x' for r in ratios)} (>= 10x), "
              f"epochs {epochs}, held-out PCC(M) {pcc_m:.3f} (>= 0.7)")
    assert record(verdicts, "learnability", ok, detail, elapsed, 600)


# ---------------------------------------------------------------- determinism

DET_CONFIG = """\
[encoder]
d = 16
depth2 = 1
depth3 = 1
num_heads1 = 2
num_heads2 = 2
num_heads3 = 2

[train]
max_epochs = 15
patience = 15
batch_size = 32
"""


def test_determinism(verdicts, tmp_path):
    t0 = time.perf_counter()
    paths = write_toy_dataset(tmp_path / "raw", patients=3, slides_per_patient=2, side=4, genes=12)
    cfg = tmp_path / "run.ini"
    cfg.write_text(DET_CONFIG)

    def cli(*args):
        return subprocess.run([sys.executable, "-m", "triplex", *args], capture_output=True, text=True)

    prep = cli("prepare", "--config", str(cfg), "--spots", str(paths["spots"]), "--counts", str(paths["counts"]),
               "--features", str(paths["features"]), "--out", str(tmp_path / "prepared"))
    assert prep.returncode == 0, prep.stderr
    runs = []
    for name in ("a", "b"):
        proc = cli("cv", "--config", str(cfg), "--seed", "7", "--prepared", str(tmp_path / "prepared"), "--out", str(tmp_path / name))
        assert proc.returncode == 0, proc.stderr
        root = tmp_path / name
        runs.append({p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
    same = runs[0] == runs[1]
    files = sorted(runs[0])
    reports = [f for f in files if f.endswith(("metrics.csv", "summary.txt", "genes.csv"))]
    ckpts = [f for f in files if f.endswith(".ckpt")]
    elapsed = time.perf_counter() - t0
    detail = f"two cv runs, seed 7, single-threaded: {len(files)} files incl. {len(reports)} reports and {len(ckpts)} checkpoints byte-identical: {same}"
    assert record(verdicts, "determinism", same and len(ckpts) == 3, detail, elapsed, 600)


# ---------------------------------------------------------------- schedule


def test_schedule_conformance(verdicts):
    t0 = time.perf_counter()
    got = (lr_schedule(0), lr_schedule(50), lr_schedule(100))
    ok = got == (1e-4, 9e-5, 8.1e-5)
    elapsed = time.perf_counter() - t0
    detail = f"lr(0), lr(50), lr(100) = {got[0]!r}, {got[1]!r}, {got[2]!r} (exact 1e-4, 9e-5, 8.1e-5)"
    assert record(verdicts, "schedule conformance", ok, detail, elapsed, 1)
