"""TDNN speaker-embedding networks with hand-written reverse-mode gradients.

Two topologies are supported:

* ``xvector``: TDNN frame layers, mean+std statistics pooling, then
  utterance-level affine layers. The last affine layer's output is the
  embedding and feeds the classifier head.
* ``dvector``: the pooling position is taken by one more TDNN layer with
  offsets (-3, 0, 3); the affine stack and head run on every frame, and the
  utterance embedding is the average of the frame embeddings.

Parameters live in a plain ``dict`` of float64 arrays keyed ``tdnn{i}.weight``,
``tdnn{i}.bias``, ``fc{i}.weight``, ``fc{i}.bias``, ``head.theta`` and
``head.bias``. Weights are stored (fan_in, fan_out) so a layer is
``x @ W + b``; ``head.theta`` holds one row per speaker.

All forward/backward routines accept arbitrary leading batch axes: frames are
``(..., T, feat_dim)``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .io import load_bundle, save_bundle
from .numkit import DEFAULT_EPSILON

ACTIVATIONS = ("relu", "tanh", "identity")
MODES = ("xvector", "dvector")

XVECTOR_OFFSETS = ((-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (0,), (0,))
DVECTOR_POOL_OFFSETS = (-3, 0, 3)

FULL_EMBED_DIM = 512
FULL_NUM_SPEAKERS = 7185
FULL_STATS_DIM = 1500


@dataclass(frozen=True)
class TdnnLayerSpec:
    offsets: tuple
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        offsets = tuple(int(o) for o in self.offsets)
        object.__setattr__(self, "offsets", offsets)
        if not offsets:
            raise InputError("TDNN offsets must be nonempty")
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise InputError(f"TDNN offsets must be strictly increasing: {offsets}")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")

    @property
    def width(self):
        return self.offsets[-1] - self.offsets[0]

    @property
    def fan_in(self):
        return len(self.offsets) * self.in_dim


@dataclass(frozen=True)
class AffineSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class NetworkConfig:
    mode: str
    tdnn_layers: tuple
    post_layers: tuple
    num_speakers: int
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "tdnn_layers", tuple(self.tdnn_layers))
        object.__setattr__(self, "post_layers", tuple(self.post_layers))
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.tdnn_layers:
            raise InputError("at least one TDNN layer is required")
        if self.num_speakers < 1:
            raise InputError("num_speakers must be positive")
        for prev, cur in zip(self.tdnn_layers, self.tdnn_layers[1:]):
            if cur.in_dim != prev.out_dim:
                raise InputError(f"TDNN dims do not chain: {prev.out_dim} -> {cur.in_dim}")
        if self.mode == "dvector" and self.tdnn_layers[-1].offsets != DVECTOR_POOL_OFFSETS:
            raise InputError(
                f"dvector mode needs a final TDNN layer with offsets {DVECTOR_POOL_OFFSETS}"
            )
        dim = self.frame_dim * (2 if self.mode == "xvector" else 1)
        for layer in self.post_layers:
            if layer.in_dim != dim:
                raise InputError(f"affine dims do not chain: {dim} -> {layer.in_dim}")
            dim = layer.out_dim

    @property
    def pooling(self):
        return "mean_std" if self.mode == "xvector" else "none"

    @property
    def feat_dim(self):
        return self.tdnn_layers[0].in_dim

    @property
    def frame_dim(self):
        return self.tdnn_layers[-1].out_dim

    @property
    def embed_dim(self):
        if self.post_layers:
            return self.post_layers[-1].out_dim
        return self.frame_dim * (2 if self.mode == "xvector" else 1)

    @property
    def context(self):
        return sum(layer.width for layer in self.tdnn_layers)

    @property
    def min_frames(self):
        return self.context + 1

    def to_header(self):
        return {
            "mode": self.mode,
            "pooling": self.pooling,
            "num_speakers": self.num_speakers,
            "epsilon": repr(float(self.epsilon)),
            "tdnn.offsets": "|".join(":".join(map(str, l.offsets)) for l in self.tdnn_layers),
            "tdnn.dims": ",".join(str(d) for d in
                                  [self.feat_dim] + [l.out_dim for l in self.tdnn_layers]),
            "tdnn.activations": ",".join(l.activation for l in self.tdnn_layers),
            "post.dims": ",".join(str(d) for d in
                                  [l.in_dim for l in self.post_layers[:1]]
                                  + [l.out_dim for l in self.post_layers]),
            "post.activations": ",".join(l.activation for l in self.post_layers),
        }

    @classmethod
    def from_header(cls, header):
        try:
            offsets = [tuple(int(o) for o in part.split(":"))
                       for part in header["tdnn.offsets"].split("|")]
            dims = [int(d) for d in header["tdnn.dims"].split(",")]
            acts = header["tdnn.activations"].split(",")
            tdnn = [TdnnLayerSpec(o, dims[i], dims[i + 1], acts[i]) for i, o in enumerate(offsets)]
            post_dims = [int(d) for d in header["post.dims"].split(",") if d]
            post_acts = [a for a in header["post.activations"].split(",") if a]
            post = [AffineSpec(post_dims[i], post_dims[i + 1], a) for i, a in enumerate(post_acts)]
            config = cls(header["mode"], tdnn, post, int(header["num_speakers"]),
                         float(header["epsilon"]))
        except (KeyError, IndexError, ValueError) as exc:
            raise InputError(f"cannot rebuild network config from header: {exc!r}") from exc
        if header.get("pooling", config.pooling) != config.pooling:
            raise InputError(f"pooling {header['pooling']!r} inconsistent with mode {config.mode!r}")
        return config


def build_config(mode, feat_dim, num_speakers, hidden=64, stats_dim=None, embed_dim=64,
                 post_hidden=(), activation="tanh", embed_activation="identity",
                 epsilon=DEFAULT_EPSILON):
    """The five-layer TDNN recipe, plus the d-vector substitute layer when asked.

    ``stats_dim`` is the width of the last frame layer before pooling
    (1500 at full scale); it defaults to ``hidden``. ``post_hidden`` lists
    extra affine+activation widths between pooling and the embedding layer.
    The embedding layer itself uses ``embed_activation`` (linear by default).
    """
    stats_dim = hidden if stats_dim is None else stats_dim
    dims = [feat_dim, hidden, hidden, hidden, hidden, stats_dim]
    tdnn = [TdnnLayerSpec(o, dims[i], dims[i + 1], activation)
            for i, o in enumerate(XVECTOR_OFFSETS)]
    if mode == "xvector":
        pooled = 2 * stats_dim
    else:
        tdnn.append(TdnnLayerSpec(DVECTOR_POOL_OFFSETS, stats_dim, hidden, activation))
        pooled = hidden
    post, dim = [], pooled
    for width in post_hidden:
        post.append(AffineSpec(dim, width, activation))
        dim = width
    post.append(AffineSpec(dim, embed_dim, embed_activation))
    return NetworkConfig(mode, tdnn, post, num_speakers, epsilon)


def full_config(mode, feat_dim, num_speakers=FULL_NUM_SPEAKERS):
    return build_config(mode, feat_dim, num_speakers, hidden=FULL_EMBED_DIM,
                        stats_dim=FULL_STATS_DIM, embed_dim=FULL_EMBED_DIM,
                        post_hidden=(FULL_EMBED_DIM,), activation="relu")


def param_shapes(config):
    shapes = {}
    for i, layer in enumerate(config.tdnn_layers):
        shapes[f"tdnn{i}.weight"] = (layer.fan_in, layer.out_dim)
        shapes[f"tdnn{i}.bias"] = (layer.out_dim,)
    for i, layer in enumerate(config.post_layers):
        shapes[f"fc{i}.weight"] = (layer.in_dim, layer.out_dim)
        shapes[f"fc{i}.bias"] = (layer.out_dim,)
    shapes["head.theta"] = (config.num_speakers, config.embed_dim)
    shapes["head.bias"] = (config.num_speakers,)
    return shapes


def init_params(config, seed):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape if name != "head.theta" else shape[::-1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, shape)
    return params


def check_params(params, config):
    for name, shape in param_shapes(config).items():
        if name not in params:
            raise InputError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise InputError(f"{name} has shape {params[name].shape}, config wants {shape}")


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activation_backward(name, z, a, g):
    if name == "relu":
        return g * (z > 0.0)
    if name == "tanh":
        return g * (1.0 - a * a)
    return g


def _splice(x, offsets):
    lo = offsets[0]
    t_out = x.shape[-2] - (offsets[-1] - lo)
    return np.concatenate([x[..., o - lo:o - lo + t_out, :] for o in offsets], axis=-1)


def _unsplice(g, offsets, t_in, d):
    lo = offsets[0]
    t_out = g.shape[-2]
    out = np.zeros(g.shape[:-2] + (t_in, d))
    for j, o in enumerate(offsets):
        out[..., o - lo:o - lo + t_out, :] += g[..., j * d:(j + 1) * d]
    return out


@dataclass
class ForwardTrace:
    """Cached activations from one forward call; consumed by :func:`backward`."""

    stage: str
    tdnn: list = field(default_factory=list)   # (spliced_input, pre, post, input_len)
    post: list = field(default_factory=list)   # (input, pre, post)
    frame_feats: np.ndarray = None
    mean: np.ndarray = None
    std: np.ndarray = None
    embedding: np.ndarray = None
    consumed: bool = False


def _forward_tdnn(params, config, frames, trace):
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] != config.feat_dim:
        raise InputError(f"frames must be (..., T, {config.feat_dim}), got {x.shape}")
    if x.shape[-2] < config.min_frames:
        raise InputError(
            f"utterance has {x.shape[-2]} frames; this network needs at least {config.min_frames}"
        )
    for i, layer in enumerate(config.tdnn_layers):
        spliced = _splice(x, layer.offsets)
        pre = spliced @ params[f"tdnn{i}.weight"] + params[f"tdnn{i}.bias"]
        post = _activate(layer.activation, pre)
        trace.tdnn.append((spliced, pre, post, x.shape[-2]))
        x = post
    trace.frame_feats = x
    return x


def _forward_post(params, config, x, trace):
    for i, layer in enumerate(config.post_layers):
        pre = x @ params[f"fc{i}.weight"] + params[f"fc{i}.bias"]
        post = _activate(layer.activation, pre)
        trace.post.append((x, pre, post))
        x = post
    return x


def forward_frames(params, config, frames):
    """Frame-level TDNN stack. Returns ``(frame_feats, trace)``."""
    trace = ForwardTrace("frames")
    return _forward_tdnn(params, config, frames, trace), trace


def head_logits(params, embedding):
    return embedding @ params["head.theta"].T + params["head.bias"]


def forward_embedding(params, config, frames):
    """Embedding without the classifier head.

    xvector: ``(..., embed_dim)``; dvector: per-frame ``(..., T', embed_dim)``.
    """
    trace = ForwardTrace("embedding")
    h = _forward_tdnn(params, config, frames, trace)
    if config.mode == "xvector":
        mean = h.mean(axis=-2)
        std = np.sqrt(((h - mean[..., None, :]) ** 2).mean(axis=-2) + config.epsilon)
        trace.mean, trace.std = mean, std
        h = np.concatenate([mean, std], axis=-1)
    emb = _forward_post(params, config, h, trace)
    trace.embedding = emb
    return emb, trace


def forward_utterance(params, config, utt):
    """Embedding and classifier logits for one utterance (or a frames array).

    In dvector mode both outputs are per frame.
    """
    frames = utt.frames if hasattr(utt, "frames") else utt
    emb, trace = forward_embedding(params, config, frames)
    trace.stage = "logits"
    return emb, head_logits(params, emb), trace


def head_backward(params, embedding, grad_logits):
    """Gradients of ``embedding @ theta.T + bias`` given dL/dlogits.

    Returns ``(grad_embedding, grad_theta, grad_bias)``.
    """
    s = params["head.theta"].shape[0]
    g = grad_logits.reshape(-1, s)
    e = embedding.reshape(-1, embedding.shape[-1])
    return grad_logits @ params["head.theta"], g.T @ e, g.sum(axis=0)


def backward(params, config, trace, grad_embedding=None, grad_logits=None, grad_frames=None):
    """Reverse pass over ``trace``; returns a dict shaped like ``params``.

    Pass whichever upstream gradients apply: ``grad_logits`` (stage "logits"),
    ``grad_embedding`` (stages "embedding"/"logits"), or ``grad_frames``
    (stage "frames").
    """
    if trace.consumed:
        raise InputError("forward trace already consumed by an earlier backward call")
    trace.consumed = True
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    if trace.stage == "frames":
        if grad_frames is None:
            raise InputError("a frame-level trace needs grad_frames")
        g = _check_shape(grad_frames, trace.frame_feats, "grad_frames")
    else:
        g = np.zeros_like(trace.embedding)
        if grad_embedding is not None:
            g = g + _check_shape(grad_embedding, trace.embedding, "grad_embedding")
        if grad_logits is not None:
            if trace.stage != "logits":
                raise InputError("grad_logits given for a trace without logits")
            ge, grads["head.theta"], grads["head.bias"] = head_backward(
                params, trace.embedding, np.asarray(grad_logits, dtype=np.float64))
            g = g + ge
        for i in reversed(range(len(config.post_layers))):
            x, pre, post = trace.post[i]
            gp = _activation_backward(config.post_layers[i].activation, pre, post, g)
            grads[f"fc{i}.weight"] = x.reshape(-1, x.shape[-1]).T @ gp.reshape(-1, gp.shape[-1])
            grads[f"fc{i}.bias"] = gp.reshape(-1, gp.shape[-1]).sum(axis=0)
            g = gp @ params[f"fc{i}.weight"].T
        if config.mode == "xvector":
            d = config.frame_dim
            g_mean, g_std = g[..., :d], g[..., d:]
            h = trace.frame_feats
            t = h.shape[-2]
            centered = h - trace.mean[..., None, :]
            g = (g_mean[..., None, :] / t
                 + (g_std / (t * trace.std))[..., None, :] * centered)

    for i in reversed(range(len(config.tdnn_layers))):
        layer = config.tdnn_layers[i]
        spliced, pre, post, t_in = trace.tdnn[i]
        gp = _activation_backward(layer.activation, pre, post, g)
        grads[f"tdnn{i}.weight"] = (spliced.reshape(-1, spliced.shape[-1]).T
                                    @ gp.reshape(-1, gp.shape[-1]))
        grads[f"tdnn{i}.bias"] = gp.reshape(-1, gp.shape[-1]).sum(axis=0)
        if i > 0:
            g = _unsplice(gp @ params[f"tdnn{i}.weight"].T, layer.offsets, t_in, layer.in_dim)
    return grads


def _check_shape(g, ref, name):
    g = np.asarray(g, dtype=np.float64)
    if g.shape != ref.shape:
        raise InputError(f"{name} has shape {g.shape}, trace expects {ref.shape}")
    return g


def extract_embedding(params, config, utt):
    """Utterance embedding: the last affine output (xvector) or the frame average (dvector)."""
    frames = utt.frames if hasattr(utt, "frames") else utt
    emb, _ = forward_embedding(params, config, frames)
    if config.mode == "dvector":
        return emb.mean(axis=-2)
    return emb


def forward_many(params, config, frames_list, max_frames=2000):
    """Embeddings for many utterances without gradients.

    Utterances are concatenated along time so each TDNN layer is a single
    matrix product; output frames whose context straddles two utterances
    are dropped. Returns a list like :func:`forward_embedding` outputs.
    """
    out, group, size = [], [], 0
    for frames in frames_list:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != config.feat_dim:
            raise InputError(f"frames must be (T, {config.feat_dim}), got {frames.shape}")
        if len(frames) < config.min_frames:
            raise InputError(f"utterance has {len(frames)} frames; "
                             f"this network needs at least {config.min_frames}")
        group.append(frames)
        size += len(frames)
        if size >= max_frames:
            out.extend(_forward_group(params, config, group))
            group, size = [], 0
    if group:
        out.extend(_forward_group(params, config, group))
    return out


def _forward_group(params, config, group):
    x = np.concatenate(group)
    for i, layer in enumerate(config.tdnn_layers):
        x = _activate(layer.activation,
                      _splice(x, layer.offsets) @ params[f"tdnn{i}.weight"] + params[f"tdnn{i}.bias"])
    starts = np.cumsum([0] + [len(g) for g in group[:-1]])
    feats = [x[s:s + len(g) - config.context] for s, g in zip(starts, group)]
    if config.mode == "xvector":
        pooled = []
        for h in feats:
            mean = h.mean(axis=0)
            std = np.sqrt(((h - mean) ** 2).mean(axis=0) + config.epsilon)
            pooled.append(np.concatenate([mean, std]))
        return list(_forward_post(params, config, np.stack(pooled), ForwardTrace("many")))
    emb = _forward_post(params, config, np.concatenate(feats), ForwardTrace("many"))
    return np.split(emb, np.cumsum([len(h) for h in feats])[:-1])


def extract_embeddings(params, config, utterances):
    frames = [u.frames if hasattr(u, "frames") else u for u in utterances]
    embs = forward_many(params, config, frames)
    if config.mode == "dvector":
        embs = [e.mean(axis=0) for e in embs]
    return np.stack(embs)


def save_model(path, params, config, header=None, extra=None):
    """Checkpoint: config header line, then one matrix block per tensor."""
    h = config.to_header()
    h.update(header or {})
    tensors = dict(params)
    tensors.update(extra or {})
    save_bundle(path, h, tensors)


def load_model(path):
    """Returns ``(params, config, header, extra_tensors)``."""
    header, tensors = load_bundle(path)
    config = NetworkConfig.from_header(header)
    names = param_shapes(config)
    params = {k: tensors.pop(k) for k in names if k in tensors}
    check_params(params, config)
    return params, config, header, tensors
