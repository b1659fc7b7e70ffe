"""Independent brute-force oracles the production implementations are
checked against.  Everything here is deliberately naive: explicit python
loops, no shared code with the package."""

import numpy as np


def triple_loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def pair_count_auroc(id_scores, ood_scores):
    wins = 0.0
    for o in ood_scores:
        for i in id_scores:
            if o > i:
                wins += 1.0
            elif o == i:
                wins += 0.5
    return wins / (len(id_scores) * len(ood_scores))


def sweep_fpr_at_tpr(id_scores, ood_scores, tpr_target=0.95):
    id_scores = list(map(float, id_scores))
    ood_scores = list(map(float, ood_scores))
    candidates = sorted(set(id_scores) | set(ood_scores))
    candidates = [candidates[0] - 1.0] + candidates
    best = None
    for t in candidates:
        tpr = sum(1 for o in ood_scores if o > t) / len(ood_scores)
        if tpr >= tpr_target:
            best = t
    return sum(1 for i in id_scores if i > best) / len(id_scores)


def confusion_pr_curve(id_scores, ood_scores):
    id_scores = list(map(float, id_scores))
    ood_scores = list(map(float, ood_scores))
    points = []
    for t in sorted(set(id_scores) | set(ood_scores), reverse=True):
        tp = sum(1 for o in ood_scores if o >= t)
        fp = sum(1 for i in id_scores if i >= t)
        fn = len(ood_scores) - tp
        points.append((tp / (tp + fn), tp / (tp + fp)))
    return points


def running_product(values):
    out = []
    acc = 1.0
    for v in values:
        acc *= float(v)
        out.append(acc)
    return out


def adam_single_step(param, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    m = (1 - beta1) * grad
    v = (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1)
    v_hat = v / (1 - beta2)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)
