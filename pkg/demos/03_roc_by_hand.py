"""
ROC, AUC and Youden's index on a toy score list
===============================================

Scores are "normality" scores, so the statistic thresholded for detection
is the negated score: an image is flagged abnormal when its score is at or
below the cutoff.
"""

import numpy as np

from flowgate.evaluation import roc, youden_cutoff

scores = np.array([-9.0, -3.0, -5.0, 1.0, -4.0, 2.0])
abnormal = np.array([1, 1, 0, 0, 1, 0])

curve = roc(-scores, abnormal)
for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
    print(f"flag if score <= {-t:+5.1f}:  FPR {f:.2f}  TPR {p:.2f}")

print("AUC", curve.auc)

# the AUC is also the probability that a random abnormal case outranks a
# random normal one, ties counting half
pairs = [(a, n) for a in -scores[abnormal == 1] for n in -scores[abnormal == 0]]
print("pairwise", np.mean([1.0 if a > n else 0.5 if a == n else 0.0 for a, n in pairs]))

t, j = youden_cutoff(curve)
print(f"Youden: J = {j:.3f}, flag if score <= {-t}")
