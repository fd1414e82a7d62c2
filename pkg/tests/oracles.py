"""Deliberately naive reference implementations used only by the tests.

Nothing here shares code with the package: loops over nodes and heads,
explicit sums, no batching, no canonical reordering.
"""

import math

import numpy as np


def naive_softmax(logits):
    m = max(logits)
    exps = [math.exp(v - m) for v in logits]
    s = sum(exps)
    return [e / s for e in exps]


def naive_layer_norm(x, gain, bias, eps):
    d = len(x)
    mu = sum(x) / d
    var = sum((v - mu) ** 2 for v in x) / d
    return np.array([gain[k] * (x[k] - mu) / math.sqrt(var + eps) + bias[k] for k in range(d)])


def naive_attention(inputs, w_q, w_k, d_head):
    n = len(inputs)
    out = np.zeros((n, n))
    for i in range(n):
        qi = w_q @ inputs[i]
        logits = [float(qi @ (w_k @ inputs[j])) / math.sqrt(d_head) for j in range(n)]
        out[i] = naive_softmax(logits)
    return out


def naive_block(xs, blk, cfg):
    n = len(xs)
    H, dh = cfg.heads, cfg.d_head
    att = []
    for i in range(n):
        head_outs = []
        for h in range(H):
            weights = naive_attention(xs, blk.w_q[h], blk.w_k[h], dh)[i]
            acc = np.zeros(dh)
            for j in range(n):
                acc = acc + weights[j] * (blk.w_v[h] @ xs[j])
            head_outs.append(acc)
        att.append(blk.w_o @ np.concatenate(head_outs))
    ys = []
    for i in range(n):
        y1 = naive_layer_norm(xs[i] + att[i], blk.ln1_gain, blk.ln1_bias, cfg.ln_epsilon)
        pre = blk.w_1 @ y1 + blk.b_1
        hidden = np.array([max(v, 0.0) for v in pre]) if cfg.activation == "relu" else np.tanh(pre)
        f = blk.w_2 @ hidden + blk.b_2
        ys.append(naive_layer_norm(y1 + f, blk.ln2_gain, blk.ln2_bias, cfg.ln_epsilon))
    return ys


def naive_transform(query, supports, params):
    xs = [np.asarray(query, float)] + [np.asarray(s, float) for s in supports]
    for blk in params.blocks:
        xs = naive_block(xs, blk, params.config)
    return xs[0], np.array(xs[1:])


def naive_auc(scores, truths):
    pos = [s for s, t in zip(scores, truths) if t]
    neg = [s for s, t in zip(scores, truths) if not t]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def naive_f1_recall(scores, truths, threshold):
    tp = fp = fn = 0
    for s, t in zip(scores, truths):
        pred = s >= threshold
        if pred and t:
            tp += 1
        elif pred and not t:
            fp += 1
        elif t:
            fn += 1
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, recall


def central_difference(f, arr, idx, eps=1e-5):
    old = arr[idx]
    arr[idx] = old + eps
    up = f()
    arr[idx] = old - eps
    down = f()
    arr[idx] = old
    return (up - down) / (2 * eps)


def rel_error(a, b, floor=1e-5):
    """Relative error with a magnitude floor.

    With a central step of 1e-5 the difference quotient carries round-off
    of order 1e-10, so gradients smaller than ~1e-5 cannot be resolved to
    1e-4 relative accuracy; the floor keeps those entries from reporting
    pure noise.
    """
    return abs(a - b) / max(abs(a), abs(b), floor)
