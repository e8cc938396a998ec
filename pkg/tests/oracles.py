"""Independent reference implementations used to check the library.

Everything here is written as plain scalar/nested loops over numpy arrays,
deliberately avoiding the code paths under test.
"""

import numpy as np


def finite_diff_grad(loss_fn, array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar loss w.r.t. every element of
    ``array`` (perturbed in place and restored)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        up = loss_fn()
        flat[i] = original - h
        down = loss_fn()
        flat[i] = original
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def softmax_rows(m: np.ndarray) -> np.ndarray:
    out = np.empty_like(m)
    for i in range(m.shape[0]):
        e = np.exp(m[i] - m[i].max())
        out[i] = e / e.sum()
    return out


def cheb_polynomial(lap: np.ndarray, k: int) -> np.ndarray:
    """T_k evaluated at a matrix via explicit matrix powers (K <= 3)."""
    n = lap.shape[0]
    eye = np.eye(n)
    if k == 0:
        return eye
    if k == 1:
        return lap.copy()
    if k == 2:
        return 2.0 * (lap @ lap) - eye
    if k == 3:
        return 4.0 * np.linalg.matrix_power(lap, 3) - 3.0 * lap
    raise ValueError(f"oracle only covers K <= 3, got {k}")


def sgcn_loop(x, cheb_t, e_t, weight_pool, bias_pool):
    """Nested-loop node-adaptive graph convolution.

    x: [B, N, C_in]; cheb_t: [K+1, N, N]; e_t: [N, d_e];
    weight_pool: [d_e, K+1, C_in, C_out]; bias_pool: [d_e, C_out].
    """
    b_sz, n, c_in = x.shape
    k_terms = cheb_t.shape[0]
    c_out = weight_pool.shape[-1]
    theta = np.zeros((n, k_terms, c_in, c_out))
    for node in range(n):
        for d in range(e_t.shape[1]):
            theta[node] += e_t[node, d] * weight_pool[d]
    bias = np.zeros((n, c_out))
    for node in range(n):
        for d in range(e_t.shape[1]):
            bias[node] += e_t[node, d] * bias_pool[d]
    z = np.zeros((b_sz, n, c_out))
    for b in range(b_sz):
        for node in range(n):
            for k in range(k_terms):
                prop = np.zeros(c_in)
                for m in range(n):
                    prop += cheb_t[k, node, m] * x[b, m]
                z[b, node] += prop @ theta[node, k]
            z[b, node] += bias[node]
    return z


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_step_loop(x_t, h_prev, cheb_t, e_t, cell_pools):
    """Scalar recomputation of the gated recurrent update with convolutional
    gates. cell_pools is a dict with keys update/reset/candidate, each a
    (weight_pool, bias_pool) pair."""
    joint = np.concatenate([x_t, h_prev], axis=-1)
    z = sigmoid(sgcn_loop(joint, cheb_t, e_t, *cell_pools["update"]))
    r = sigmoid(sgcn_loop(joint, cheb_t, e_t, *cell_pools["reset"]))
    gated = np.concatenate([x_t, r * h_prev], axis=-1)
    c = np.tanh(sgcn_loop(gated, cheb_t, e_t, *cell_pools["candidate"]))
    return z * h_prev + (1.0 - z) * c


def attention_loop(q, k, v):
    """Explicit exp/normalize/weighted-sum attention for 2-d q, k, v."""
    d_k = q.shape[-1]
    out = np.zeros((q.shape[0], v.shape[-1]))
    for i in range(q.shape[0]):
        scores = np.array([q[i] @ k[j] / np.sqrt(d_k) for j in range(k.shape[0])])
        e = np.exp(scores - scores.max())
        w = e / e.sum()
        for j in range(v.shape[0]):
            out[i] += w[j] * v[j]
    return out


def multi_head_loop(x, w_q, w_k, w_v, w_o):
    """Per-head loop attention over the L axis of x [B, G, L, d]."""
    b_sz, g_sz, l_sz, d = x.shape
    heads = w_q.shape[0]
    out = np.zeros_like(x)
    for b in range(b_sz):
        for g in range(g_sz):
            seq = x[b, g]                              # [L, d]
            per_head = []
            for j in range(heads):
                per_head.append(attention_loop(seq @ w_q[j], seq @ w_k[j], seq @ w_v[j]))
            out[b, g] = np.concatenate(per_head, axis=-1) @ w_o
    return out


def spatial_attention_loop(x, w_q, w_k, w_v, w_o):
    flipped = x.transpose(0, 2, 1, 3)
    return multi_head_loop(flipped, w_q, w_k, w_v, w_o).transpose(0, 2, 1, 3)


def stfa_loop(x, fusion, spatial):
    """Fusion attention oracle: spatial attention output feeds the value slot
    of a per-head temporal attention. fusion/spatial are (wq, wk, wv, wo)."""
    s = spatial_attention_loop(x, *spatial)
    w_q, w_k, w_v, w_o = fusion
    b_sz, n_sz, t_sz, d = x.shape
    heads = w_q.shape[0]
    out = np.zeros_like(x)
    for b in range(b_sz):
        for n in range(n_sz):
            seq = x[b, n]
            val = s[b, n]
            per_head = []
            for j in range(heads):
                per_head.append(attention_loop(seq @ w_q[j], seq @ w_k[j], val @ w_v[j]))
            out[b, n] = np.concatenate(per_head, axis=-1) @ w_o
    return out


def metrics_loop(pred, truth, mean, std):
    """Scalar-loop MAE/RMSE/MAPE on normalized inputs, denormalized inside."""
    p = pred.reshape(-1)
    t = truth.reshape(-1)
    abs_sum = 0.0
    sq_sum = 0.0
    ratio_sum = 0.0
    masked_in = 0
    for i in range(p.size):
        pv = p[i] * std + mean
        tv = t[i] * std + mean
        err = pv - tv
        abs_sum += abs(err)
        sq_sum += err * err
        if tv != 0:
            masked_in += 1
            ratio_sum += abs(err / tv)
    mae = abs_sum / p.size
    rmse = np.sqrt(sq_sum / p.size)
    mape = (ratio_sum / masked_in * 100.0) if masked_in else None
    return mae, rmse, mape, masked_in
