"""Set-transformer rotation estimator.

Each image becomes one latent token. Reference tokens carry an embedding
of their known rotation; query tokens carry a shared learned mask
vector. A stack of pre-norm transformer blocks mixes the set, and a
small head maps each updated query token to a 6D rotation that is
projected onto SO(3).

No positional encodings are used by default, so predictions do not
depend on the order of the references. Under the ``blocked`` attention
policy a query only sees the references and itself, which makes each
query's prediction independent of the other queries in the pass.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from app.errors import BadLayer, ShapeMismatch
from app.schemas import ModelConfig
from app.services import autograd as ag
from app.services.autograd import Tensor
from app.services.so3 import as_rotation_set, project_so3, rot6d_from_matrix

logger = logging.getLogger(__name__)

EMBED_INIT_STD = 0.02
CONV_KERNEL = 3
ROLE_REFERENCE = "reference"
ROLE_QUERY = "query"

# Head output bias; random-init predictions start near the identity rotation
_IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered name -> shape table; the single source of the layout."""
    d = config.d
    shapes: Dict[str, Tuple[int, ...]] = {}

    c_in = 3
    for i, c_out in enumerate(config.encoder_channels):
        shapes[f"enc.conv{i}.W"] = (c_out, c_in, CONV_KERNEL, CONV_KERNEL)
        shapes[f"enc.conv{i}.b"] = (c_out,)
        c_in = c_out
    shapes["enc.proj.W"] = (c_in, d)
    shapes["enc.proj.b"] = (d,)

    shapes["rot.fc1.W"] = (6, config.rot_hidden)
    shapes["rot.fc1.b"] = (config.rot_hidden,)
    shapes["rot.fc2.W"] = (config.rot_hidden, d)
    shapes["rot.fc2.b"] = (d,)

    shapes["mask"] = (d,)
    if config.positional_encoding:
        shapes["pos"] = (config.max_tokens, d)

    hidden = config.mlp_ratio * d
    for i in range(config.depth):
        p = f"blk{i}"
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.attn.qkv.W"] = (d, 3 * d)
        shapes[f"{p}.attn.qkv.b"] = (3 * d,)
        shapes[f"{p}.attn.proj.W"] = (d, d)
        shapes[f"{p}.attn.proj.b"] = (d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.mlp.fc1.W"] = (d, hidden)
        shapes[f"{p}.mlp.fc1.b"] = (hidden,)
        shapes[f"{p}.mlp.fc2.W"] = (hidden, d)
        shapes[f"{p}.mlp.fc2.b"] = (d,)

    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["head.fc1.W"] = (d, config.head_hidden)
    shapes["head.fc1.b"] = (config.head_hidden,)
    shapes["head.fc2.W"] = (config.head_hidden, 6)
    shapes["head.fc2.b"] = (6,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(config).values()))


def _init_value(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> NDArray:
    if name in ("mask", "pos"):
        return rng.normal(0.0, EMBED_INIT_STD, size=shape)
    if name.endswith(".g"):
        return np.ones(shape)
    if name == "head.fc2.b":
        return _IDENTITY_6D.copy()
    if name.endswith(".b"):
        return np.zeros(shape)
    # Weights: fan-in scaled normal. Conv weights are (out, in, k, k).
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


@dataclass
class ModelParams:
    """Named parameter tensors, ordered as ``parameter_shapes`` lists them."""
    config: ModelConfig
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def arrays(self) -> Dict[str, NDArray]:
        return {name: t.data for name, t in self.tensors.items()}

    def encoder_names(self) -> List[str]:
        return [name for name in self.tensors if name.startswith("enc.")]

    def trainable(self, freeze_encoder: bool = False) -> Dict[str, Tensor]:
        if not freeze_encoder:
            return dict(self.tensors)
        return {n: t for n, t in self.tensors.items() if not n.startswith("enc.")}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Mapping[str, NDArray]) -> "ModelParams":
        """Rebuild parameters from stored arrays, checking names and shapes."""
        expected = parameter_shapes(config)
        if list(arrays) != list(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ShapeMismatch(f"parameters (missing {missing[:3]}, unexpected {extra[:3]})")
        tensors = {}
        for name, shape in expected.items():
            value = np.asarray(arrays[name])
            if value.shape != shape:
                raise ShapeMismatch(f"parameter {name}", value.shape, shape)
            tensors[name] = Tensor(value, requires_grad=True)
        return cls(config=config, tensors=tensors)


def init_params(config: ModelConfig, seed: Optional[int] = None) -> ModelParams:
    """Fresh parameters in the current default precision."""
    rng = np.random.default_rng(config.init_seed if seed is None else seed)
    tensors = {
        name: Tensor(_init_value(name, shape, rng), requires_grad=True)
        for name, shape in parameter_shapes(config).items()
    }
    params = ModelParams(config=config, tensors=tensors)
    logger.debug(f"Initialized {params.count()} parameters ({len(tensors)} tensors)")
    return params


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

def _mlp(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    h = ag.gelu(ag.linear(x, params[f"{prefix}.fc1.W"], params[f"{prefix}.fc1.b"]))
    return ag.linear(h, params[f"{prefix}.fc2.W"], params[f"{prefix}.fc2.b"])


def encode(images: NDArray, params: ModelParams) -> Tensor:
    """Latent vector per image: (H, W, 3) -> (d,), (k, H, W, 3) -> (k, d)."""
    images = np.asarray(images)
    single = images.ndim == 3
    batch = images[None] if single else images
    crop = params.config.crop
    if batch.ndim != 4 or batch.shape[1:] != (crop, crop, 3):
        raise ShapeMismatch("encode", images.shape, (crop, crop, 3))

    x = Tensor(batch.transpose(0, 3, 1, 2) - 0.5)
    for i in range(len(params.config.encoder_channels)):
        x = ag.conv2d(x, params[f"enc.conv{i}.W"], params[f"enc.conv{i}.b"], stride=2, padding=1)
        x = ag.gelu(x)
    pooled = ag.mean(x, axis=(2, 3))
    z = ag.linear(pooled, params["enc.proj.W"], params["enc.proj.b"])
    return ag.reshape(z, (params.config.d,)) if single else z


def embed_rotation(R: NDArray, params: ModelParams) -> Tensor:
    """MLP over the 6D encoding: (3, 3) -> (d,), (n, 3, 3) -> (n, d)."""
    R = np.asarray(R, dtype=np.float64)
    return _mlp(Tensor(rot6d_from_matrix(R)), params, "rot")


# ---------------------------------------------------------------------------
# Tokens
# ---------------------------------------------------------------------------

@dataclass
class TokenBatch:
    """References first, then queries, in input order."""
    tokens: Tensor  # (n, d)
    roles: List[str]

    @property
    def n_ref(self) -> int:
        return self.roles.count(ROLE_REFERENCE)

    @property
    def n_query(self) -> int:
        return self.roles.count(ROLE_QUERY)

    def __len__(self) -> int:
        return len(self.roles)


def join_tokens(ref_tokens: Tensor, query_latents: Tensor, params: ModelParams) -> TokenBatch:
    n_ref, n_query = ref_tokens.shape[0], query_latents.shape[0]
    if n_ref < 1 or n_query < 1:
        raise ShapeMismatch("assemble_tokens", ref_tokens.shape, query_latents.shape)
    queries = ag.add(query_latents, params["mask"])
    tokens = ag.concat([ref_tokens, queries], axis=0)
    if params.config.positional_encoding:
        n = n_ref + n_query
        if n > params.config.max_tokens:
            raise ShapeMismatch("positional encoding", (n,), (params.config.max_tokens,))
        tokens = ag.add(tokens, ag.slice_axis(params["pos"], 0, 0, n))
    roles = [ROLE_REFERENCE] * n_ref + [ROLE_QUERY] * n_query
    return TokenBatch(tokens=tokens, roles=roles)


def assemble_tokens(
    ref_latents: Tensor,
    ref_rotations: NDArray,
    query_latents: Tensor,
    params: ModelParams,
) -> TokenBatch:
    """z_r + e(R_r) for each reference, z_q + mask for each query."""
    ref_rotations = as_rotation_set(ref_rotations)
    if ref_latents.shape[0] != ref_rotations.shape[0]:
        raise ShapeMismatch("assemble_tokens", ref_latents.shape, ref_rotations.shape)
    ref_tokens = ag.add(ref_latents, embed_rotation(ref_rotations, params))
    return join_tokens(ref_tokens, query_latents, params)


def attention_mask(n_ref: int, n_query: int, policy: str) -> NDArray[np.bool_]:
    """(n, n) keep-mask: row i lists the tokens token i may attend to."""
    n = n_ref + n_query
    if policy == "full":
        return np.ones((n, n), dtype=bool)
    mask = np.zeros((n, n), dtype=bool)
    mask[:, :n_ref] = True
    idx = np.arange(n_ref, n)
    mask[idx, idx] = True
    return mask


# ---------------------------------------------------------------------------
# Transformer
# ---------------------------------------------------------------------------

def _attention(x: Tensor, params: ModelParams, prefix: str, mask: NDArray) -> Tuple[Tensor, NDArray]:
    B, n, d = x.shape
    heads = params.config.heads
    dh = d // heads

    qkv = ag.linear(x, params[f"{prefix}.qkv.W"], params[f"{prefix}.qkv.b"])

    def split(i: int) -> Tensor:
        part = ag.slice_axis(qkv, -1, i * d, (i + 1) * d)
        return ag.transpose(ag.reshape(part, (B, n, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(0), split(1), split(2)
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    weights = ag.softmax(scores, axis=-1, mask=mask)
    ctx = ag.reshape(ag.transpose(ag.matmul(weights, v), (0, 2, 1, 3)), (B, n, d))
    out = ag.linear(ctx, params[f"{prefix}.proj.W"], params[f"{prefix}.proj.b"])
    return out, weights.data


def _block(x: Tensor, params: ModelParams, index: int, mask: NDArray) -> Tuple[Tensor, NDArray]:
    p = f"blk{index}"
    h = ag.layernorm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
    attn, weights = _attention(h, params, f"{p}.attn", mask)
    x = ag.add(x, attn)
    h = ag.layernorm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
    x = ag.add(x, _mlp(h, params, f"{p}.mlp"))
    return x, weights


def _run(tokens: Tensor, n_ref: int, params: ModelParams) -> Tuple[Tensor, List[NDArray]]:
    """Transformer over (B, n, d) tokens; returns (B, n_query, 6)."""
    config = params.config
    if tokens.ndim != 3 or tokens.shape[-1] != config.d:
        raise ShapeMismatch("forward", tokens.shape, (config.d,))
    n = tokens.shape[1]
    mask = attention_mask(n_ref, n - n_ref, config.attention)

    x = tokens
    maps = []
    for i in range(config.depth):
        x, weights = _block(x, params, i, mask)
        maps.append(weights)
    x = ag.layernorm(x, params["ln_f.g"], params["ln_f.b"])
    queries = ag.slice_axis(x, 1, n_ref, n)
    return _mlp(queries, params, "head"), maps


def forward(batch: TokenBatch, params: ModelParams, return_attention: bool = False):
    """6D output per query token, shape (n_query, 6).

    With ``return_attention`` also returns each layer's post-softmax
    weights as (heads, n, n) arrays.
    """
    n_ref = batch.n_ref
    tokens = ag.reshape(batch.tokens, (1,) + batch.tokens.shape)
    out, maps = _run(tokens, n_ref, params)
    out = ag.reshape(out, out.shape[1:])
    if return_attention:
        return out, [m[0] for m in maps]
    return out


def forward_episodes(batches: Sequence[TokenBatch], params: ModelParams) -> Tensor:
    """One pass over several episodes of identical shape: (B, n_query, 6)."""
    n_ref = batches[0].n_ref
    if any(b.n_ref != n_ref or len(b) != len(batches[0]) for b in batches):
        raise ShapeMismatch("forward_episodes", *(b.tokens.shape for b in batches))
    stacked = ag.concat([ag.reshape(b.tokens, (1,) + b.tokens.shape) for b in batches], axis=0)
    out, _ = _run(stacked, n_ref, params)
    return out


def attention_scores(batch: TokenBatch, params: ModelParams, layer: int = -1) -> NDArray[np.float64]:
    """Head-averaged attention of each query over the references.

    Rows are restricted to reference columns and renormalized, so each
    row sums to one. ``layer=-1`` selects the last layer.
    """
    depth = params.config.depth
    index = layer + depth if layer < 0 else layer
    if not 0 <= index < depth:
        raise BadLayer(f"layer {layer} outside a depth-{depth} transformer")
    with ag.no_grad():
        _, maps = forward(batch, params, return_attention=True)
    weights = maps[index].mean(axis=0)[batch.n_ref:, :batch.n_ref].astype(np.float64)
    return weights / weights.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

@dataclass
class ReferenceBank:
    """Onboarded references: rotation-enriched tokens, computed once."""
    tokens: Tensor  # (n_ref, d)
    latents: Tensor  # (n_ref, d), encoder output only
    rotations: NDArray[np.float64]

    @property
    def n_ref(self) -> int:
        return self.rotations.shape[0]


def onboard(ref_images: NDArray, ref_rotations: NDArray, params: ModelParams) -> ReferenceBank:
    ref_rotations = as_rotation_set(ref_rotations)
    with ag.no_grad():
        latents = encode(ref_images, params)
        if latents.shape[0] != ref_rotations.shape[0]:
            raise ShapeMismatch("onboard", latents.shape, ref_rotations.shape)
        tokens = ag.add(latents, embed_rotation(ref_rotations, params))
    return ReferenceBank(tokens=tokens, latents=latents, rotations=ref_rotations)


def bank_tokens(bank: ReferenceBank, query_images: NDArray, params: ModelParams) -> TokenBatch:
    """Onboarded references followed by freshly encoded queries.

    A single (H, W, 3) query image is treated as a batch of one.
    """
    query_images = np.asarray(query_images)
    if query_images.ndim == 3:
        query_images = query_images[None]
    with ag.no_grad():
        return join_tokens(bank.tokens, encode(query_images, params), params)


def predict_6d_with_bank(bank: ReferenceBank, query_images: NDArray, params: ModelParams) -> NDArray:
    with ag.no_grad():
        return forward(bank_tokens(bank, query_images, params), params).data


def predict_with_bank(bank: ReferenceBank, query_images: NDArray, params: ModelParams) -> NDArray[np.float64]:
    """Rotation per query image in one transformer pass: (n_query, 3, 3)."""
    return project_so3(predict_6d_with_bank(bank, query_images, params))


def predict_rotation(
    ref_images: NDArray,
    ref_rotations: NDArray,
    query_images: NDArray,
    params: ModelParams,
) -> NDArray[np.float64]:
    return predict_with_bank(onboard(ref_images, ref_rotations, params), query_images, params)
