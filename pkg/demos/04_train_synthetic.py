"""Training on a synthetic cohort with a planted linear map.

Expression is a fixed linear map of each spot's pooled feature plus a little
noise, the same for every patient, so a model trained on some patients should
predict the others well.  A narrow model and a short schedule keep this under
a minute.
"""
import time

import numpy as np
from threadpoolctl import threadpool_limits

from triplex.encoders import EncoderConfig
from triplex.evaluation import aggregate_metrics, slide_metrics
from triplex.model import TriplexModel
from triplex.synthetic import make_cohort
from triplex.training import TrainConfig, dataset_loss, fit

slides = make_cohort(patients=3, slides_per_patient=1, side=6, m=8, seed=3)
train, val, test = slides
cfg = EncoderConfig(d=16, depth2=1, depth3=1, num_heads2=2, num_heads3=2)
model = TriplexModel(cfg, m=8, seed=0)
print(f"model: {model.num_parameters()} parameters")

before = dataset_loss(model, [train], 0.5)["total"]
t0 = time.perf_counter()
with threadpool_limits(limits=1):
    result = fit(model, [train], [val], TrainConfig(max_epochs=60, patience=60, batch_size=16, lr0=1e-3))
after = dataset_loss(model, [train], 0.5)["total"]
print(f"{len(result.history)} epochs in {time.perf_counter() - t0:.0f}s, best at {result.best_epoch}")
print(f"training loss {before:.3f} -> {after:.4f} ({before / after:.0f}x lower)")
for e in result.history[:: max(1, len(result.history) // 6)]:
    print(f"  epoch {e.epoch:3d}  lr {e.lr:.1e}  total {e.losses['total']:.4f}  val PCC(M) {e.val_pcc_m:.3f}")

report = aggregate_metrics([slide_metrics(model.predict_slide(test), test.expression, test.slide_id)])
print(f"unseen patient: PCC(M) {report.pcc_m:.3f}  MSE {report.mse:.4f}  MAE {report.mae:.4f}")
