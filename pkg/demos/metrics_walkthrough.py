"""ROC, AUROC, G-Mean and bootstrap on a four-sample example, then on noise."""

import numpy as np

from cvad import metrics

scores = np.array([0.1, 0.4, 0.35, 0.8])
labels = np.array([0, 0, 1, 1])

curve = metrics.roc_curve(scores, labels)
print("threshold   TPR   FPR")
for t, tp, fp in zip(curve.thresholds, curve.tpr, curve.fpr):
    print(f"{t:9.2f} {tp:5.2f} {fp:5.2f}")
print("AUROC", metrics.auroc(scores, labels))

# two points tie at sqrt(0.5); the one with the lower FPR is kept
t, tp, fp = metrics.gmean_threshold(curve)
print(f"G-Mean threshold {t} (TPR {tp}, FPR {fp})")

rng = np.random.default_rng(0)
y = rng.integers(0, 2, 400)
s = rng.standard_normal(400) + 1.5 * y
res = metrics.bootstrap(s, y, rounds=10, seed=0)
print(f"bootstrap AUROC {res.auc_mean:.3f} +/- {res.auc_std:.3f}")
print(f"bootstrap TPR {res.tpr_mean:.3f} +/- {res.tpr_std:.3f}  FPR {res.fpr_mean:.3f} +/- {res.fpr_std:.3f}")
