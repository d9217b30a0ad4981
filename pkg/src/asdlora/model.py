"""ViT-style spectrogram encoder with analytic reverse-mode gradients.

Blocks are pre-norm (LayerNorm -> MHSA -> residual, LayerNorm -> GELU MLP ->
residual).  Linear weights are stored as (d_out, d_in) and applied as
``x @ W.T``.  LoRA adapters on the k/q/v projections are folded into an
effective weight for each forward pass; their gradients are recovered from
the gradient of that effective weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dsp import Spectrogram
from .lora import LoraAdapter

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass
class EncoderConfig:
    n_layers: int = 12
    d_model: int = 48
    n_heads: int = 4
    patch_freq: int = 16
    patch_time: int = 16
    mlp_ratio: int = 4
    n_mels: int = 128
    max_tokens: int = 4096

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_mels % self.patch_freq:
            raise ValueError(f"patch height {self.patch_freq} does not divide {self.n_mels} mel bins")

    @property
    def patch_dim(self) -> int:
        return self.patch_freq * self.patch_time

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def n_tokens(self, n_frames: int) -> int:
        return math.ceil(n_frames / self.patch_time) * (self.n_mels // self.patch_freq)


@dataclass
class Embedding:
    vector: np.ndarray
    clip_id: str = ""


def sinusoidal_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table


def extract_patches(frames: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """Cut a (T, F) spectrogram into flattened patches, time-major token order.

    The time axis is padded on the right by repeating the last frame.
    Returns (n_tokens, patch_time * patch_freq).
    """
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("empty spectrogram")
    T, F = frames.shape
    if F != cfg.n_mels:
        raise ValueError(f"spectrogram has {F} bins, encoder expects {cfg.n_mels}")
    pt, pf = cfg.patch_time, cfg.patch_freq
    n_cols = math.ceil(T / pt)
    if n_cols * pt != T:
        pad = np.repeat(frames[-1:], n_cols * pt - T, axis=0)
        frames = np.concatenate([frames, pad], axis=0)
    n_rows = F // pf
    grid = frames.reshape(n_cols, pt, n_rows, pf).transpose(0, 2, 1, 3)
    return grid.reshape(n_cols * n_rows, pt * pf)


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    shapes = {"patch.W": (d, cfg.patch_dim), "patch.b": (d,)}
    for l in range(1, cfg.n_layers + 1):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.Wq": (d, d), p + "attn.bq": (d,),
            p + "attn.Wk": (d, d), p + "attn.bk": (d,),
            p + "attn.Wv": (d, d), p + "attn.bv": (d,),
            p + "attn.Wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.W1": (h, d), p + "mlp.b1": (h,),
            p + "mlp.W2": (d, h), p + "mlp.b2": (d,),
        })
    shapes.update({"final_ln.g": (d,), "final_ln.b": (d,)})
    return shapes


def init_weights(cfg: EncoderConfig, seed: int, dtype=np.float64, std: float = 0.02) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("W"):
            params[name] = (rng.standard_normal(shape) * std).astype(dtype)
        elif leaf == "g":
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


# --- primitive layers --------------------------------------------------------

def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_backward(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dg, db


def _gelu(a):
    """tanh-form GELU; returns the activation and the tanh term for backward."""
    t = np.tanh(_GELU_C * (a + 0.044715 * a * a * a))
    return 0.5 * a * (1.0 + t), t


def _gelu_grad(a, t):
    return 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * a * a)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _wgrad(dy, x):
    """Sum over batch/tokens of dy^T x for y = x W^T."""
    return dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])


class NonFiniteActivation(FloatingPointError):
    pass


class Encoder:
    """Frozen-base transformer encoder with optional LoRA adapters.

    ``params`` maps tensor names (see :func:`param_shapes`) to arrays;
    ``adapters`` maps ``"lora.<layer>.<matrix>"`` to :class:`LoraAdapter`.
    Training code updates these arrays in place.
    """

    def __init__(self, cfg: EncoderConfig, params: dict, adapters: dict | None = None,
                 check_finite: bool = False):
        self.cfg = cfg
        self.params = params
        self.adapters: dict[str, LoraAdapter] = dict(adapters or {})
        self.check_finite = check_finite
        expected = param_shapes(cfg)
        for name, shape in expected.items():
            if name not in params:
                raise KeyError(f"missing encoder tensor {name!r}")
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        for key, ad in self.adapters.items():
            if not 1 <= ad.site.layer <= cfg.n_layers:
                raise ValueError(f"adapter {key} targets layer {ad.site.layer}, "
                                 f"encoder has {cfg.n_layers}")
            if ad.A.shape[1] != cfg.d_model or ad.B.shape[0] != cfg.d_model:
                raise ValueError(f"adapter {key} dims do not match d_model={cfg.d_model}")
        self._pe = sinusoidal_table(cfg.max_tokens, cfg.d_model)

    @classmethod
    def initialize(cls, cfg: EncoderConfig, seed: int, dtype=np.float64) -> "Encoder":
        return cls(cfg, init_weights(cfg, seed, dtype))

    @property
    def dtype(self):
        return self.params["patch.W"].dtype

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        for key, ad in self.adapters.items():
            out[key + ".A"] = ad.A
            out[key + ".B"] = ad.B
        return out

    def n_base_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # --- forward ---------------------------------------------------------------

    def _weight(self, layer: int, matrix: str) -> np.ndarray:
        W = self.params[f"layers.{layer}.attn.W{matrix}"]
        ad = self.adapters.get(f"lora.{layer}.{matrix}")
        if ad is None:
            return W
        return W + ad.scale * (ad.B @ ad.A)

    def embed_tokens(self, patches: np.ndarray) -> np.ndarray:
        n = patches.shape[-2]
        if n > self.cfg.max_tokens:
            raise ValueError(f"{n} tokens exceed max_tokens={self.cfg.max_tokens}")
        p = self.params
        return patches @ p["patch.W"].T + p["patch.b"] + self._pe[:n].astype(self.dtype)

    def _check(self, x, where):
        if self.check_finite and not np.all(np.isfinite(x)):
            raise NonFiniteActivation(f"non-finite activations after {where}")

    def attention(self, x: np.ndarray, layer: int, cache: dict | None = None) -> np.ndarray:
        """Pre-norm multi-head self-attention sub-block including the residual."""
        p, cfg = self.params, self.cfg
        pre = f"layers.{layer}."
        B, N, d = x.shape
        H, dh = cfg.n_heads, cfg.d_head
        h, ln_cache = _ln_forward(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        Wq, Wk, Wv = (self._weight(layer, m) for m in "qkv")
        q = (h @ Wq.T + p[pre + "attn.bq"]).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
        k = (h @ Wk.T + p[pre + "attn.bk"]).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
        v = (h @ Wv.T + p[pre + "attn.bv"]).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
        probs = _softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh))
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, N, d)
        out = x + ctx @ p[pre + "attn.Wo"].T + p[pre + "attn.bo"]
        if cache is not None:
            cache.update(ln1=ln_cache, h=h, q=q, k=k, v=v, probs=probs, ctx=ctx,
                         Wq=Wq, Wk=Wk, Wv=Wv)
        return out

    def mlp(self, x: np.ndarray, layer: int, cache: dict | None = None) -> np.ndarray:
        p = self.params
        pre = f"layers.{layer}."
        h, ln_cache = _ln_forward(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        a = h @ p[pre + "mlp.W1"].T + p[pre + "mlp.b1"]
        g, t = _gelu(a)
        out = x + g @ p[pre + "mlp.W2"].T + p[pre + "mlp.b2"]
        if cache is not None:
            cache.update(ln2=ln_cache, h2=h, a=a, g=g, tanh=t)
        return out

    def forward(self, patches: np.ndarray, keep_cache: bool = False):
        """Batch forward: (B, N, patch_dim) -> pooled embeddings (B, d_model)."""
        patches = np.asarray(patches, dtype=self.dtype)
        if patches.ndim == 2:
            patches = patches[None]
        x = self.embed_tokens(patches)
        caches = []
        for layer in range(1, self.cfg.n_layers + 1):
            c = {} if keep_cache else None
            x = self.attention(x, layer, c)
            x = self.mlp(x, layer, c)
            self._check(x, f"layer {layer}")
            caches.append(c)
        y, fcache = _ln_forward(x, self.params["final_ln.g"], self.params["final_ln.b"])
        emb = y.mean(axis=1)
        if not keep_cache:
            return emb, None
        return emb, {"patches": patches, "layers": caches, "final": fcache, "n_tokens": x.shape[1]}

    def encode(self, s: Spectrogram, clip_id: str = "") -> Embedding:
        emb, _ = self.forward(extract_patches(s.frames, self.cfg))
        return Embedding(emb[0], clip_id)

    # --- backward --------------------------------------------------------------

    def backward(self, cache: dict, d_emb: np.ndarray, wrt=None) -> dict[str, np.ndarray]:
        """Gradients of ``sum(d_emb * emb)`` w.r.t. the named tensors in ``wrt``.

        ``wrt=None`` means every base tensor and every adapter factor.
        """
        if wrt is None:
            wrt = set(self.named_parameters())
        wrt = set(wrt)
        p, cfg = self.params, self.cfg
        grads: dict[str, np.ndarray] = {}
        d_emb = np.asarray(d_emb, dtype=self.dtype)
        B, N = d_emb.shape[0], cache["n_tokens"]
        dy = np.broadcast_to(d_emb[:, None, :] / N, (B, N, cfg.d_model))
        dx, dg, db = _ln_backward(dy, p["final_ln.g"], cache["final"])
        self._keep(grads, wrt, "final_ln.g", dg)
        self._keep(grads, wrt, "final_ln.b", db)

        H, dh = cfg.n_heads, cfg.d_head
        for layer in range(cfg.n_layers, 0, -1):
            c = cache["layers"][layer - 1]
            pre = f"layers.{layer}."
            # MLP sub-block
            dg_act = dx @ p[pre + "mlp.W2"]
            self._keep(grads, wrt, pre + "mlp.W2", lambda: _wgrad(dx, c["g"]))
            self._keep(grads, wrt, pre + "mlp.b2", lambda: dx.reshape(-1, dx.shape[-1]).sum(0))
            da = dg_act * _gelu_grad(c["a"], c["tanh"])
            dh2 = da @ p[pre + "mlp.W1"]
            self._keep(grads, wrt, pre + "mlp.W1", lambda: _wgrad(da, c["h2"]))
            self._keep(grads, wrt, pre + "mlp.b1", lambda: da.reshape(-1, da.shape[-1]).sum(0))
            dln, dgain, dbias = _ln_backward(dh2, p[pre + "ln2.g"], c["ln2"])
            self._keep(grads, wrt, pre + "ln2.g", dgain)
            self._keep(grads, wrt, pre + "ln2.b", dbias)
            dx = dx + dln
            # attention sub-block
            dctx = dx @ p[pre + "attn.Wo"]
            self._keep(grads, wrt, pre + "attn.Wo", lambda: _wgrad(dx, c["ctx"]))
            self._keep(grads, wrt, pre + "attn.bo", lambda: dx.reshape(-1, dx.shape[-1]).sum(0))
            dctx = dctx.reshape(B, N, H, dh).transpose(0, 2, 1, 3)
            probs = c["probs"]
            dprobs = dctx @ c["v"].transpose(0, 1, 3, 2)
            dv = probs.transpose(0, 1, 3, 2) @ dctx
            dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
            dscores /= math.sqrt(dh)
            dq = dscores @ c["k"]
            dk = dscores.transpose(0, 1, 3, 2) @ c["q"]
            h = c["h"]
            dh_in = np.zeros_like(h)
            for m, dproj in (("q", dq), ("k", dk), ("v", dv)):
                dproj = dproj.transpose(0, 2, 1, 3).reshape(B, N, cfg.d_model)
                dh_in += dproj @ c["W" + m]
                self._keep(grads, wrt, pre + f"attn.b{m}",
                           lambda: dproj.reshape(-1, cfg.d_model).sum(0))
                key = f"lora.{layer}.{m}"
                ad = self.adapters.get(key)
                need_ad = ad is not None and (key + ".A" in wrt or key + ".B" in wrt)
                if pre + f"attn.W{m}" in wrt or need_ad:
                    dW = _wgrad(dproj, h)
                    self._keep(grads, wrt, pre + f"attn.W{m}", dW)
                    if need_ad:
                        self._keep(grads, wrt, key + ".A", lambda: ad.scale * (ad.B.T @ dW))
                        self._keep(grads, wrt, key + ".B", lambda: ad.scale * (dW @ ad.A.T))
            dln, dgain, dbias = _ln_backward(dh_in, p[pre + "ln1.g"], c["ln1"])
            self._keep(grads, wrt, pre + "ln1.g", dgain)
            self._keep(grads, wrt, pre + "ln1.b", dbias)
            dx = dx + dln
        self._keep(grads, wrt, "patch.W", lambda: _wgrad(dx, cache["patches"]))
        self._keep(grads, wrt, "patch.b", lambda: dx.reshape(-1, dx.shape[-1]).sum(0))
        return grads

    @staticmethod
    def _keep(grads, wrt, name, value):
        if name in wrt:
            grads[name] = value() if callable(value) else value
