"""Low-rank adapters on feed-forward down-projections.

For a target weight ``W`` of shape [d_in, d_out] the adapter keeps
``B`` [d_in, r] (zeros at creation) and ``A`` [r, d_out] (N(0, 0.02)), and the
effective weight is ``W + (alpha / r) * B @ A``.  Starting from ``B = 0`` the
adapted model is exactly the base model.
"""

from __future__ import annotations

import fnmatch
import logging

import numpy as np

from . import autograd as ag
from .autograd import Tensor

log = logging.getLogger(__name__)

DOWN_PROJ_PATTERN = "*.ffn.down"


class AdapterSet:
    def __init__(self, rank, alpha, factors):
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.rank = rank
        self.alpha = alpha
        self.factors = factors  # name -> (A, B)

    @property
    def scaling(self):
        return self.alpha / self.rank

    @property
    def targets(self):
        return self.factors.keys()

    def tensors(self):
        """Trainable tensors keyed by checkpoint name (``lora/<target>.A`` etc.)."""
        out = {}
        for name, (A, B) in self.factors.items():
            out[f"lora/{name}.A"] = A
            out[f"lora/{name}.B"] = B
        return out

    def delta(self, name) -> np.ndarray:
        A, B = self.factors[name]
        return (B.data @ A.data) * B.dtype.type(self.scaling)

    def delta_apply(self, name, x):
        """x @ ((alpha/r) B A) without materializing the delta."""
        A, B = self.factors[name]
        return ag.scale(ag.matmul(ag.matmul(x, B), A), self.scaling)

    def num_params(self):
        return sum(A.size + B.size for A, B in self.factors.values())

    @classmethod
    def from_tensors(cls, tensors, rank, alpha):
        factors = {}
        for key, t in tensors.items():
            if not key.startswith("lora/"):
                continue
            base, which = key[len("lora/"):].rsplit(".", 1)
            A, B = factors.get(base, (None, None))
            t.requires_grad = True
            factors[base] = (t, B) if which == "A" else (A, t)
        return cls(rank, alpha, factors)


def _shape_of(v):
    return tuple(v.shape) if hasattr(v, "shape") else tuple(v)


def inject(params, rank=16, alpha=None, target_pattern=DOWN_PROJ_PATTERN, seed=0, dtype=np.float32) -> AdapterSet:
    """Create adapters for every 2-D weight whose name matches ``target_pattern``.

    ``params`` may hold Tensors or bare shapes, so large shape tables (e.g. a
    7B layout) can be counted without allocating the base model.  ``alpha``
    defaults to ``rank`` (scaling 1).
    """
    alpha = rank if alpha is None else alpha
    names = [n for n, v in params.items() if fnmatch.fnmatchcase(n, target_pattern) and len(_shape_of(v)) == 2]
    if not names:
        available = ", ".join(sorted(params))
        raise ValueError(f"LoRA pattern {target_pattern!r} matched no weights; available: {available}")
    rng = np.random.Generator(np.random.PCG64(seed))
    factors = {}
    for name in names:
        d_in, d_out = _shape_of(params[name])
        if rank >= min(d_in, d_out):
            log.warning("LoRA rank %d >= min(%d, %d) for %s: no compression", rank, d_in, d_out, name)
        A = Tensor(rng.normal(0.0, 0.02, size=(rank, d_out)).astype(dtype), requires_grad=True, name=f"lora/{name}.A")
        B = Tensor(np.zeros((d_in, rank), dtype=dtype), requires_grad=True, name=f"lora/{name}.B")
        factors[name] = (A, B)
    return AdapterSet(rank, alpha, factors)


def count_trainable(obj, filter="full") -> int:
    """Number of scalars that receive gradients.

    ``obj`` is an AdapterSet, or a mapping of names to Tensors/shapes.  With a
    mapping, ``filter`` is ``"full"`` (everything), a glob pattern, or a
    predicate on the name.
    """
    if isinstance(obj, AdapterSet):
        return obj.num_params()
    if filter == "full":
        keep = lambda name: True  # noqa: E731
    elif callable(filter):
        keep = filter
    else:
        keep = lambda name: fnmatch.fnmatchcase(name, filter)  # noqa: E731
    return int(sum(int(np.prod(_shape_of(v))) for n, v in obj.items() if keep(n)))


def merge(params, adapters: AdapterSet):
    """Fresh params with every adapter delta folded into its base weight.

    Merging does not reset the adapters; merging the result again with the
    same AdapterSet adds the delta a second time.
    """
    merged = {}
    for name, t in params.items():
        data = t.data
        if name in adapters.factors:
            delta = adapters.delta(name)
            if delta.shape != data.shape:
                raise ValueError(f"adapter delta {delta.shape} does not match {name} {data.shape}")
            data = data + delta.astype(data.dtype)
        else:
            data = data.copy()
        merged[name] = Tensor(data, requires_grad=t.requires_grad, name=name)
    return merged


# Published LLaMA-2 layouts used as shape fixtures for the parameter arithmetic.
LLAMA2_LAYOUTS = {
    "7b": dict(vocab=32000, d_model=4096, d_ff=11008, n_layers=32),
    "13b": dict(vocab=32000, d_model=5120, d_ff=13824, n_layers=40),
}


def llama2_shape_table(size="7b") -> dict[str, tuple[int, int]]:
    """Name -> shape for a LLaMA-2 model (gated FFN, RMSNorm, untied head)."""
    cfg = LLAMA2_LAYOUTS[size]
    d, f, V = cfg["d_model"], cfg["d_ff"], cfg["vocab"]
    shapes = {"embed_tokens": (V, d)}
    for i in range(cfg["n_layers"]):
        p = f"layer.{i}"
        for w in "qkvo":
            shapes[f"{p}.attn.{w}"] = (d, d)
        shapes[f"{p}.ffn.gate"] = (d, f)
        shapes[f"{p}.ffn.up"] = (d, f)
        shapes[f"{p}.ffn.down"] = (f, d)
        shapes[f"{p}.input_norm"] = (d,)
        shapes[f"{p}.post_attn_norm"] = (d,)
    shapes["norm"] = (d,)
    shapes["lm_head"] = (V, d)
    return shapes
