"""The full command-line pipeline on the bundled toy data.

prepare -> cv -> predict -> eval -> heatmap, each a separate `triplex`
invocation writing into its own directory.  The toy cohort is a few dozen
Poisson-noisy spots, so the scores are low; the point here is the plumbing.
"""
import subprocess
import sys
import tempfile
from pathlib import Path

from triplex.synthetic import write_toy_dataset

work = Path(tempfile.mkdtemp(prefix="triplex-demo-"))
raw = write_toy_dataset(work / "raw", patients=3, slides_per_patient=2, side=4, genes=12)
(work / "run.ini").write_text(
    "[encoder]\nd = 16\ndepth2 = 1\ndepth3 = 1\nnum_heads2 = 2\nnum_heads3 = 2\n\n"
    "[train]\nmax_epochs = 40\npatience = 40\nbatch_size = 16\nlr0 = 0.001\n"
)


def triplex(*args):
    cmd = [sys.executable, "-m", "triplex", str(args[0]), "--config", str(work / "run.ini"), *map(str, args[1:])]
    print("$ triplex " + " ".join(map(str, args)).replace(str(work) + "/", ""))
    proc = subprocess.run(cmd, capture_output=True, text=True)
    print("  " + (proc.stdout.strip() or proc.stderr.strip()).replace("\n", "\n  ").replace(str(work) + "/", ""))
    return proc.returncode


triplex("prepare", "--spots", raw["spots"], "--counts", raw["counts"], "--features", raw["features"], "--m-keep", 10, "--out", work / "prep")
triplex("cv", "--prepared", work / "prep", "--seed", 1, "--out", work / "cv")
triplex("predict", "--prepared", work / "prep", "--checkpoint", work / "cv/fold_00/model.ckpt", "--out", work / "pred")
preds = sorted((work / "pred").glob("*.csv"))
triplex("eval", "--prepared", work / "prep", "--predictions", *preds, "--ranking", work / "cv/genes.csv", "--out", work / "eval")
gene = (work / "prep/genes.txt").read_text().split()[0]
triplex("heatmap", "--prepared", work / "prep", "--predictions", preds[0], "--gene", gene, "--out", work / "maps")

# input errors exit with 2 and say what was wrong
code = triplex("heatmap", "--prepared", work / "prep", "--predictions", preds[0], "--gene", "NOPE", "--out", work / "maps2")
print("exit status for an unknown gene:", code)
print("outputs in", work)
