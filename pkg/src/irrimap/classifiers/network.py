"""Transformer-style sequence classifier with a hand-built backward pass.

Architecture: per-timestep linear embedding into d_model, fixed sinusoidal
positional encoding, one encoder block (multi-head self-attention and a
position-wise feed-forward, each with residual + layer normalization), mean
pooling over time, an optional rectified penultimate dense layer, and a
single logit.  Everything runs in float64 numpy; gradients are derived
analytically and verified against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LN_EPS = 1e-5


@dataclass(frozen=True)
class NetworkConfig:
    input_layers: int = 1
    timesteps: int = 36
    d_model: int = 32
    heads: int = 4
    ffn_dim: int = 64
    penultimate: bool = True      # saliency variant drops this layer

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must divide evenly across heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def positional_encoding(timesteps: int, d_model: int) -> np.ndarray:
    key = (timesteps, d_model)
    if key not in _PE_CACHE:
        pos = np.arange(timesteps)[:, None].astype(np.float64)
        i = np.arange(d_model)[None, :]
        angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
        _PE_CACHE[key] = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return _PE_CACHE[key]


def _flat_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum over (batch, time) of outer products: (N,T,D), (N,T,E) -> (D,E)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: NetworkConfig, seed: int = 0,
                dtype=np.float64) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, unit layer-norm gains.

    Training runs in float32 for speed; gradient verification initializes
    in float64.  The same draws are made either way, so dtypes differ only
    in rounding.
    """
    rng = np.random.default_rng(seed)
    d, f, L = config.d_model, config.ffn_dim, config.input_layers
    params = {
        "embed_w": _glorot(rng, L, d),
        "embed_b": np.zeros(d),
        "attn_wq": _glorot(rng, d, d),
        "attn_bq": np.zeros(d),
        # No key-projection bias: a uniform key shift cancels inside the
        # softmax, so its gradient is identically zero and it can never train.
        "attn_wk": _glorot(rng, d, d),
        "attn_wv": _glorot(rng, d, d),
        "attn_bv": np.zeros(d),
        "attn_wo": _glorot(rng, d, d),
        "attn_bo": np.zeros(d),
        "ln1_g": np.ones(d),
        "ln1_b": np.zeros(d),
        "ffn_w1": _glorot(rng, d, f),
        "ffn_b1": np.zeros(f),
        "ffn_w2": _glorot(rng, f, d),
        "ffn_b2": np.zeros(d),
        "ln2_g": np.ones(d),
        "ln2_b": np.zeros(d),
    }
    if config.penultimate:
        params["pen_w"] = _glorot(rng, d, d)
        params["pen_b"] = np.zeros(d)
    params["out_w"] = _glorot(rng, d, 1)[:, 0]
    params["out_b"] = np.zeros(1)
    return {k: v.astype(dtype) for k, v in params.items()}


def parameter_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


def _layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return gain * xhat + bias, (xhat, inv)


def _layer_norm_backward(dy, gain, cache):
    xhat, inv = cache
    dgain = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbias = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def forward(params: dict, x: np.ndarray, config: NetworkConfig,
            need_cache: bool = True):
    """Logits for an (N, L, T) batch; optionally the cache for backward."""
    dtype = params["embed_w"].dtype
    x = np.asarray(x, dtype=dtype)
    n, L, t = x.shape
    if L != config.input_layers or t != config.timesteps:
        raise ValueError(f"batch shape {x.shape} does not match the network "
                         f"({config.input_layers} layers x {config.timesteps} steps)")
    d, nh, dh = config.d_model, config.heads, config.head_dim

    seq = np.ascontiguousarray(np.transpose(x, (0, 2, 1)))  # (N, T, L)
    h0 = seq @ params["embed_w"] + params["embed_b"]        # (N, T, D)
    h0 = h0 + positional_encoding(t, d).astype(dtype)

    q = h0 @ params["attn_wq"] + params["attn_bq"]
    k = h0 @ params["attn_wk"]
    v = h0 @ params["attn_wv"] + params["attn_bv"]
    qh = q.reshape(n, t, nh, dh).transpose(0, 2, 1, 3)     # (N, H, T, dh)
    kh = k.reshape(n, t, nh, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(n, t, nh, dh).transpose(0, 2, 1, 3)
    scores = qh @ kh.transpose(0, 1, 3, 2) / float(np.sqrt(dh))   # (N, H, T, T)
    scores -= scores.max(axis=-1, keepdims=True)
    exps = np.exp(scores)
    attn = exps / exps.sum(axis=-1, keepdims=True)
    ctx = attn @ vh                                        # (N, H, T, dh)
    ctx_merged = ctx.transpose(0, 2, 1, 3).reshape(n, t, d)
    proj = ctx_merged @ params["attn_wo"] + params["attn_bo"]

    r1 = h0 + proj
    h1, ln1_cache = _layer_norm(r1, params["ln1_g"], params["ln1_b"])

    f_pre = h1 @ params["ffn_w1"] + params["ffn_b1"]
    f_act = np.maximum(f_pre, 0.0)
    f_out = f_act @ params["ffn_w2"] + params["ffn_b2"]

    r2 = h1 + f_out
    h2, ln2_cache = _layer_norm(r2, params["ln2_g"], params["ln2_b"])

    pooled = h2.mean(axis=1)                               # (N, D)
    if config.penultimate:
        pen_pre = pooled @ params["pen_w"] + params["pen_b"]
        pen = np.maximum(pen_pre, 0.0)
    else:
        pen_pre = None
        pen = pooled
    logits = pen @ params["out_w"] + params["out_b"][0]

    if not need_cache:
        return logits
    cache = dict(seq=seq, h0=h0, qh=qh, kh=kh, vh=vh, attn=attn,
                 ctx_merged=ctx_merged, ln1_cache=ln1_cache, h1=h1,
                 f_pre=f_pre, f_act=f_act, ln2_cache=ln2_cache, h2=h2,
                 pooled=pooled, pen_pre=pen_pre, pen=pen)
    return logits, cache


def backward(params: dict, cache: dict, dlogits: np.ndarray,
             config: NetworkConfig) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given d(loss)/d(logits)."""
    n, t = cache["h0"].shape[:2]
    d, nh, dh = config.d_model, config.heads, config.head_dim
    grads = {}

    pen = cache["pen"]
    grads["out_w"] = pen.T @ dlogits
    grads["out_b"] = np.array([dlogits.sum()])
    dpen = dlogits[:, None] * params["out_w"][None, :]
    if config.penultimate:
        dpen_pre = dpen * (cache["pen_pre"] > 0)
        grads["pen_w"] = cache["pooled"].T @ dpen_pre
        grads["pen_b"] = dpen_pre.sum(axis=0)
        dpooled = dpen_pre @ params["pen_w"].T
    else:
        dpooled = dpen

    dh2 = np.repeat(dpooled[:, None, :] / t, t, axis=1)    # mean-pool backward

    dr2, grads["ln2_g"], grads["ln2_b"] = _layer_norm_backward(
        dh2, params["ln2_g"], cache["ln2_cache"])
    dh1 = dr2.copy()
    df_out = dr2
    grads["ffn_w2"] = _flat_outer(cache["f_act"], df_out)
    grads["ffn_b2"] = df_out.sum(axis=(0, 1))
    df_act = df_out @ params["ffn_w2"].T
    df_pre = df_act * (cache["f_pre"] > 0)
    grads["ffn_w1"] = _flat_outer(cache["h1"], df_pre)
    grads["ffn_b1"] = df_pre.sum(axis=(0, 1))
    dh1 += df_pre @ params["ffn_w1"].T

    dr1, grads["ln1_g"], grads["ln1_b"] = _layer_norm_backward(
        dh1, params["ln1_g"], cache["ln1_cache"])
    dh0 = dr1.copy()
    dproj = dr1
    grads["attn_wo"] = _flat_outer(cache["ctx_merged"], dproj)
    grads["attn_bo"] = dproj.sum(axis=(0, 1))
    dctx_merged = dproj @ params["attn_wo"].T
    dctx = dctx_merged.reshape(n, t, nh, dh).transpose(0, 2, 1, 3)

    attn, vh = cache["attn"], cache["vh"]
    dattn = dctx @ vh.transpose(0, 1, 3, 2)                # (N, H, T, T)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * attn
    dscores /= float(np.sqrt(dh))
    dqh = dscores @ cache["kh"]
    dkh = dscores.transpose(0, 1, 3, 2) @ cache["qh"]

    dq = dqh.transpose(0, 2, 1, 3).reshape(n, t, d)
    dk = dkh.transpose(0, 2, 1, 3).reshape(n, t, d)
    dv = dvh.transpose(0, 2, 1, 3).reshape(n, t, d)
    h0 = cache["h0"]
    grads["attn_wq"] = _flat_outer(h0, dq)
    grads["attn_bq"] = dq.sum(axis=(0, 1))
    grads["attn_wk"] = _flat_outer(h0, dk)
    grads["attn_wv"] = _flat_outer(h0, dv)
    grads["attn_bv"] = dv.sum(axis=(0, 1))
    dh0 += dq @ params["attn_wq"].T
    dh0 += dk @ params["attn_wk"].T
    dh0 += dv @ params["attn_wv"].T

    grads["embed_w"] = _flat_outer(cache["seq"], dh0)
    grads["embed_b"] = dh0.sum(axis=(0, 1))
    return grads


def weighted_bce_loss(logits: np.ndarray, labels: np.ndarray,
                      weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Weighted-mean binary cross-entropy on logits; returns loss, dL/dlogit."""
    labels = np.asarray(labels, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    wsum = weights.sum()
    per = np.logaddexp(0.0, logits) - labels * logits
    loss = float((weights * per).sum() / wsum)
    sig = 1.0 / (1.0 + np.exp(-logits))
    dlogits = weights * (sig - labels) / wsum
    return loss, dlogits


def loss_and_grads(params: dict, x: np.ndarray, y: np.ndarray, w: np.ndarray,
                   config: NetworkConfig) -> tuple[float, dict]:
    logits, cache = forward(params, x, config)
    loss, dlogits = weighted_bce_loss(logits, y, w)
    if not np.isfinite(loss):
        raise FloatingPointError(
            f"non-finite training loss {loss!r}; logit range "
            f"[{np.min(logits):.3g}, {np.max(logits):.3g}]")
    grads = backward(params, cache, dlogits.astype(logits.dtype), config)
    return loss, grads


def predict_proba(params: dict, x: np.ndarray, config: NetworkConfig) -> np.ndarray:
    logits = forward(params, x, config, need_cache=False)
    return 1.0 / (1.0 + np.exp(-logits))


def encoder_output_and_logit_grad(params: dict, x: np.ndarray,
                                  config: NetworkConfig):
    """Encoder output A (N, T, D) and d(logit)/dA for the saliency variant.

    Requires the no-penultimate network, where the logit is a linear readout
    of the pooled encoder output and the gradient is exact and cheap.
    """
    if config.penultimate:
        raise ValueError("saliency gradients require the no-penultimate variant")
    _, cache = forward(params, x, config)
    a = cache["h2"]
    n, t, _ = a.shape
    dlogit_da = np.broadcast_to(params["out_w"][None, None, :] / t, a.shape)
    return a, dlogit_da


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState,
              learning_rate: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> None:
    """One in-place Adam update."""
    state.step += 1
    t = state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        mhat = state.m[name] / (1 - beta1 ** t)
        vhat = state.v[name] / (1 - beta2 ** t)
        params[name] -= learning_rate * mhat / (np.sqrt(vhat) + epsilon)


def gradient_check(params: dict, x: np.ndarray, y: np.ndarray, w: np.ndarray,
                   config: NetworkConfig, step: float = 1e-5,
                   corrupt: str | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``corrupt`` doubles the analytic gradient of the named parameter, as a
    planted fault to confirm the detector reacts.
    """
    if x.shape[0] > 8:
        raise ValueError("gradient check is meant for small batches (<= 8)")
    _, grads = loss_and_grads(params, x, y, w, config)
    if corrupt is not None:
        grads[corrupt] = 2.0 * grads[corrupt]
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lo_plus, _ = weighted_bce_loss(forward(params, x, config, need_cache=False), y, w)
            flat[i] = orig - step
            lo_minus, _ = weighted_bce_loss(forward(params, x, config, need_cache=False), y, w)
            flat[i] = orig
            numeric = (lo_plus - lo_minus) / (2 * step)
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
