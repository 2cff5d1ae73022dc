"""A seeded toy vision-language transformer with constructed grounding.

Nothing here is trained.  The residual stream of width ``D`` is carved
into fixed subspaces::

    obj   one direction per object; carries patch content (read by values)
    read  where attention writes what it copied; object unembeddings read it
    cell  one-hot patch index of visual tokens (read by keys)
    pos   one-hot text position modulo the number of cells (read by queries)
    bias  constant 1 on text tokens (read by fixed-focus queries)
    lang  token identity; the MLPs compute a bigram language prior here

Every head copies ``obj -> read`` through its value/output pair, so
attending to a patch that holds object ``o`` raises the logit of ``o``'s
token: the output embedding of ``o`` is its patch code carried through
that read-out.  In every layer a seeded half of the heads are *scanning*
heads whose focus cell follows the text position (their maps move every
step) and the rest are *fixed-focus* heads looking at one blob of cells.
That plants a known dynamic/static split for the profiler to recover.

All randomness comes from PCG64 generators keyed by
``SeedSequence(seed, spawn_key=(stream,))`` with one stream per tensor
(see ``_STREAMS``), plus Gaussian noise on every projection so that the
model is a perturbed random transformer rather than an exact circuit.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import assemble_attention, scaled_scores, softmax_rows
from .errors import ConfigError, InternalStateError, ShapeError
from .vce import Phase

EOS = 0
BOS = 1

_STREAMS = ("embed", "unembed", "planting", "qkvo_noise", "mlp", "patch_noise", "cooccur")

# construction gains
_CELL_GAIN = 1.0
_OBJ_GAIN = 1.0
_POS_GAIN = 1.0
_INHIBIT = 5.0  # object tokens carry -_INHIBIT * their code: no immediate repeats
_SCAN_BETA = 3.0
_FIXED_BETA = 2.5
_READ_GAIN = 1.5
_NOISE = 0.08
_PRIOR_GAIN = 1.1
_OBJ_LOGIT = 3.0
_EOS_BIAS = 3.5
_FUNC_BIAS = -2.5
_NEVER = -1e4
_OBJ_PRIOR = 0.3   # scale of the unstructured language prior on object tokens
_COOC_GAIN = 3.0   # object token -> its partner's co-occurrence direction
_COOC_LOGIT = 0.75


@dataclass(frozen=True)
class ToyModelConfig:
    n_layers: int = 12
    n_heads: int = 8
    head_dim: int = 16
    width: int = 128
    grid: tuple = (4, 4)
    vocab_size: int = 64
    n_objects: int = 16
    seed: int = 0
    n_scanning: int = None
    mlp_ratio: int = 2

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if self.n_scanning is None:
            object.__setattr__(self, "n_scanning", self.n_heads // 2)
        self.validate()

    @property
    def n_cells(self):
        return self.grid[0] * self.grid[1]

    @property
    def lang_dims(self):
        return self.width - (3 * self.n_objects + 2 * self.n_cells + 1)

    def validate(self):
        if self.width != self.n_heads * self.head_dim:
            raise ConfigError(f"width {self.width} != heads {self.n_heads} x head_dim {self.head_dim}")
        if self.n_layers < 4:
            raise ConfigError("need at least 4 layers so a middle band exists")
        if self.n_objects < 1 or self.vocab_size < self.n_objects + 3:
            raise ConfigError(f"vocab {self.vocab_size} too small for {self.n_objects} objects + EOS, BOS, 1 function token")
        if min(self.grid) < 1:
            raise ConfigError(f"degenerate grid {self.grid}")
        if self.head_dim < max(self.n_objects, self.n_cells):
            raise ConfigError("head_dim must be >= max(n_objects, grid cells) for the planted circuit")
        if self.lang_dims < 8:
            raise ConfigError(f"width {self.width} leaves only {self.lang_dims} language dims (need 8)")
        if not 0 <= self.n_scanning <= self.n_heads:
            raise ConfigError("n_scanning outside [0, n_heads]")

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


def _rng(seed, stream):
    ss = np.random.SeedSequence(seed, spawn_key=(_STREAMS.index(stream),))
    return np.random.Generator(np.random.PCG64(ss))


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def rms_norm(x):
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


@dataclass
class Layout:
    obj: slice
    read: slice
    cell: slice
    pos: slice
    bias: int
    cooc: slice
    lang: slice


class ToyModel:
    """Immutable weights plus the token/subspace bookkeeping."""

    def __init__(self, cfg, weights, layout, planted_dynamic):
        self.cfg = cfg
        self.w = weights
        self.layout = layout
        self.planted_dynamic = planted_dynamic
        for arr in weights.values():
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)

    @property
    def n_layers(self):
        return self.cfg.n_layers

    @property
    def n_heads(self):
        return self.cfg.n_heads

    @property
    def n_vis(self):
        return self.cfg.n_cells

    @property
    def first_object_token(self):
        return self.cfg.vocab_size - self.cfg.n_objects

    @property
    def function_tokens(self):
        return list(range(2, self.first_object_token))

    def object_token(self, obj):
        if not 0 <= obj < self.cfg.n_objects:
            raise ValueError(f"object id {obj} outside [0, {self.cfg.n_objects})")
        return self.first_object_token + obj

    def token_object(self, token):
        o = token - self.first_object_token
        return o if 0 <= o < self.cfg.n_objects else None

    def default_prompt(self):
        """The fixed caption-style prompt: BOS followed by three function tokens."""
        return [BOS] + self.function_tokens[:3]

    def embed_scene(self, scene, masked=()):
        """Visual token embeddings, one per grid cell (row-major).

        Cells whose object is in ``masked`` get an all-zero embedding.
        """
        H, W = self.cfg.grid
        if scene.grid.shape != (H, W):
            raise ShapeError(f"scene grid {scene.grid.shape} does not match model grid {(H, W)}")
        L = self.layout
        flat = scene.grid.reshape(-1)
        x = np.zeros((self.n_vis, self.cfg.width))
        x[np.arange(self.n_vis), L.cell.start + np.arange(self.n_vis)] = _CELL_GAIN
        for c, o in enumerate(flat):
            if o >= 0:
                x[c, L.obj.start + o] = _OBJ_GAIN
        x += self.w["patch_noise"]
        for c, o in enumerate(flat):
            if o >= 0 and o in masked:
                x[c] = 0.0
        return x

    def embed_tokens(self, tokens, start, parallel=False):
        """Token plus position embeddings; ``parallel`` rows share position ``start``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError("token id outside vocabulary")
        offset = np.zeros(len(tokens), dtype=np.int64) if parallel else np.arange(len(tokens))
        pos = (start + offset) % self.cfg.n_cells
        return self.w["embed"][tokens] + self.w["pos"][pos]


def build_toy_model(cfg=None):
    """Deterministically construct a :class:`ToyModel` from ``cfg``."""
    cfg = cfg or ToyModelConfig()
    cfg.validate()
    O, C, D, d, Hh = cfg.n_objects, cfg.n_cells, cfg.width, cfg.head_dim, cfg.n_heads
    lay = Layout(
        obj=slice(0, O),
        read=slice(O, 2 * O),
        cell=slice(2 * O, 2 * O + C),
        pos=slice(2 * O + C, 2 * O + 2 * C),
        bias=2 * O + 2 * C,
        cooc=slice(2 * O + 2 * C + 1, 3 * O + 2 * C + 1),
        lang=slice(3 * O + 2 * C + 1, D),
    )
    n_lang = cfg.lang_dims
    V = cfg.vocab_size
    first_obj = V - O
    w = {}

    g = _rng(cfg.seed, "embed")
    E = np.zeros((V, D))
    E[:, lay.lang] = g.standard_normal((V, n_lang)) / np.sqrt(n_lang)
    E[:, lay.bias] = 1.0
    for o in range(O):
        E[first_obj + o, lay.obj.start + o] = -_INHIBIT
    w["embed"] = E
    P = np.zeros((C, D))
    P[np.arange(C), lay.pos.start + np.arange(C)] = _POS_GAIN
    w["pos"] = P

    g = _rng(cfg.seed, "unembed")
    U = np.zeros((V, D))
    U[:, lay.lang] = _PRIOR_GAIN * g.standard_normal((V, n_lang)) / np.sqrt(n_lang)
    for o in range(O):
        U[first_obj + o, lay.read.start + o] = _OBJ_LOGIT
    bias = np.full(V, _FUNC_BIAS)
    bias[EOS] = _EOS_BIAS
    bias[BOS] = _NEVER
    bias[first_obj:] = 0.0
    w["unembed"] = U
    w["logit_bias"] = bias

    U[first_obj:, lay.lang] *= _OBJ_PRIOR

    # co-occurrence prior: emitting object o pushes toward its partner
    g = _rng(cfg.seed, "cooccur")
    perm = g.permutation(O)
    partner = np.empty(O, dtype=np.int64)
    partner[perm] = np.roll(perm, 1)
    for o in range(O):
        E[first_obj + o, lay.cooc.start + partner[o]] = _COOC_GAIN
        U[first_obj + o, lay.cooc.start + o] = _COOC_LOGIT
    w["partner"] = partner

    g = _rng(cfg.seed, "planting")
    gh, gw = cfg.grid
    yy, xx = np.divmod(np.arange(C), gw)
    Wq = np.zeros((cfg.n_layers, D, Hh * d))
    Wk = np.zeros_like(Wq)
    Wv = np.zeros_like(Wq)
    Wo = np.zeros((cfg.n_layers, Hh * d, D))
    planted = []
    for li in range(cfg.n_layers):
        scanning = frozenset(g.permutation(Hh)[: cfg.n_scanning].tolist())
        planted.append(scanning)
        for h in range(Hh):
            cols = slice(h * d, (h + 1) * d)
            Uk = _orthogonal(g, d)[:C]
            R = _orthogonal(g, d)[:O]
            Wk[li, lay.cell, cols] = Uk
            Wv[li, lay.obj, cols] = R
            Wo[li, cols, lay.read] = _READ_GAIN * R.T / Hh
            if h in scanning:
                sigma = g.permutation(C)
                Wq[li, lay.pos, cols] = _SCAN_BETA * Uk[sigma]
            else:
                cy, cx = g.integers(gh), g.integers(gw)
                blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.8 ** 2))
                Wq[li, lay.bias, cols] = _FIXED_BETA * blob @ Uk
    g = _rng(cfg.seed, "qkvo_noise")
    for arr in (Wq, Wk, Wv, Wo):
        noise = _NOISE * g.standard_normal(arr.shape) / np.sqrt(D)
        if arr is Wv:
            # values only ever carry (slightly mixed) object codes
            keep = noise[:, lay.obj].copy()
            noise[:] = 0.0
            noise[:, lay.obj] = keep
        if arr is Wo:
            noise[:, :, lay.obj] = 0.0  # keep object codes and their read-out clean
            noise[:, :, lay.read] = 0.0
            noise[:, :, lay.cooc] = 0.0
        arr += noise
    w.update(Wq=Wq, Wk=Wk, Wv=Wv, Wo=Wo)

    g = _rng(cfg.seed, "mlp")
    F = cfg.mlp_ratio * D
    W1 = np.zeros((cfg.n_layers, D, F))
    W2 = np.zeros((cfg.n_layers, F, D))
    W1[:, lay.lang, :] = g.standard_normal((cfg.n_layers, n_lang, F)) / np.sqrt(n_lang)
    W2[:, :, lay.lang] = 0.5 * g.standard_normal((cfg.n_layers, F, n_lang)) / np.sqrt(F)
    w.update(W1=W1, W2=W2)

    g = _rng(cfg.seed, "patch_noise")
    w["patch_noise"] = 0.05 * g.standard_normal((C, D))
    w["patch_noise"][:, lay.obj] = 0.0  # an empty cell carries no object evidence

    return ToyModel(cfg, w, lay, tuple(planted))


class Cache:
    """Keys/values for the committed prefix: visual tokens, prompt, outputs."""

    def __init__(self, model, capacity=256):
        c = model.cfg
        self.k = np.zeros((c.n_layers, c.n_heads, capacity, c.head_dim))
        self.v = np.zeros_like(self.k)
        self.length = 0
        self.n_vis = 0

    @property
    def text_position(self):
        return self.length - self.n_vis

    def append(self, k, v):
        """Append ``(layers, heads, n, d)`` key/value blocks."""
        n = k.shape[2]
        if k.shape != v.shape or k.shape[:2] != self.k.shape[:2] or k.shape[3] != self.k.shape[3]:
            raise InternalStateError(f"cache block shape {k.shape} does not fit cache {self.k.shape}")
        need = self.length + n
        if need > self.k.shape[2]:
            grow = max(need, 2 * self.k.shape[2])
            pad = ((0, 0), (0, 0), (0, grow - self.k.shape[2]), (0, 0))
            self.k = np.pad(self.k, pad)
            self.v = np.pad(self.v, pad)
        self.k[:, :, self.length:need] = k
        self.v[:, :, self.length:need] = v
        self.length = need

    def copy(self):
        other = Cache.__new__(Cache)
        other.k = self.k.copy()
        other.v = self.v.copy()
        other.length = self.length
        other.n_vis = self.n_vis
        return other


@dataclass
class ScoreSite:
    """What an intervention hook sees for one (layer, head).

    ``s_vis`` has one row per query; ``q`` holds those query vectors and
    ``k_vis`` the shared visual keys, so hooks can recompute scores for
    rewritten queries.
    """

    layer: int
    head: int
    phase: Phase
    s_vis: np.ndarray
    s_text: np.ndarray
    q: np.ndarray
    k_vis: np.ndarray
    d: int


@dataclass
class StepOutput:
    logits: np.ndarray          # (rows, vocab)
    vis_attn: np.ndarray        # (layers, heads, rows, n_vis) post-softmax
    vis_scores: np.ndarray      # (layers, heads, rows, n_vis) scores actually used
    k_new: np.ndarray = field(repr=False, default=None)  # (layers, heads, rows, d)
    v_new: np.ndarray = field(repr=False, default=None)


def _split_heads(x, n_heads, d):
    return x.reshape(x.shape[0], n_heads, d).transpose(1, 0, 2)


def _mlp(model, li, x):
    return _gelu(rms_norm(x) @ model.w["W1"][li]) @ model.w["W2"][li]


def _forward_visual(model, vis, cache):
    """Causal self-attention over the visual prefix; never hooked."""
    c = model.cfg
    n = vis.shape[0]
    x = vis.copy()
    mask = np.tril(np.ones((n, n), dtype=bool))
    ks, vs = [], []
    for li in range(c.n_layers):
        h_in = rms_norm(x)
        q = _split_heads(h_in @ model.w["Wq"][li], c.n_heads, c.head_dim)
        k = _split_heads(h_in @ model.w["Wk"][li], c.n_heads, c.head_dim)
        v = _split_heads(h_in @ model.w["Wv"][li], c.n_heads, c.head_dim)
        out = np.empty_like(q)
        for h in range(c.n_heads):
            s = np.where(mask, scaled_scores(q[h], k[h], c.head_dim), -np.inf)
            out[h] = softmax_rows(s) @ v[h]
        x = x + out.transpose(1, 0, 2).reshape(n, -1) @ model.w["Wo"][li]
        x = x + _mlp(model, li, x)
        ks.append(k)
        vs.append(v)
    cache.append(np.stack(ks), np.stack(vs))
    cache.n_vis = n


def _forward_text(model, x, cache, new_mask, hook, phase):
    """Run text-query rows through every layer against ``cache``.

    ``new_mask[i, j]`` says whether new row ``i`` may attend to new row
    ``j``: lower-triangular for a prompt, identity for parallel branches.
    """
    c = model.cfg
    n = x.shape[0]
    L, Hh, d = c.n_layers, c.n_heads, c.head_dim
    n_vis, n_prefix = cache.n_vis, cache.length
    vis_attn = np.empty((L, Hh, n, n_vis))
    vis_scores = np.empty((L, Hh, n, n_vis))
    k_all = np.empty((L, Hh, n, d))
    v_all = np.empty((L, Hh, n, d))
    root_d = np.sqrt(d)
    for li in range(L):
        h_in = rms_norm(x)
        q = _split_heads(h_in @ model.w["Wq"][li], Hh, d)
        k = _split_heads(h_in @ model.w["Wk"][li], Hh, d)
        v = _split_heads(h_in @ model.w["Wv"][li], Hh, d)
        ck = cache.k[li, :, :n_prefix]
        cv = cache.v[li, :, :n_prefix]
        s_text = np.concatenate(
            [
                np.matmul(q, ck[:, n_vis:].transpose(0, 2, 1)) / root_d,
                np.where(new_mask, np.matmul(q, k.transpose(0, 2, 1)) / root_d, -np.inf),
            ],
            axis=-1,
        )
        s_vis = vis_scores[li]
        for h in range(Hh):
            k_vis = ck[h, :n_vis]
            sv = scaled_scores(q[h], k_vis, d)
            if hook is not None:
                sv = hook(ScoreSite(li, h, phase, sv, s_text[h], q[h], k_vis, d))
            s_vis[h] = sv
        a = assemble_attention(s_vis, s_text)
        out = np.matmul(a[..., :n_prefix], cv) + np.matmul(a[..., n_prefix:], v)
        vis_attn[li] = a[..., :n_vis]
        x = x + out.transpose(1, 0, 2).reshape(n, -1) @ model.w["Wo"][li]
        x = x + _mlp(model, li, x)
        k_all[li] = k
        v_all[li] = v
    logits = rms_norm(x) @ model.w["unembed"].T + model.w["logit_bias"]
    return StepOutput(logits, vis_attn, vis_scores, k_all, v_all)


def _visual_input(model, scene_or_embeds):
    if isinstance(scene_or_embeds, SyntheticScene):
        return model.embed_scene(scene_or_embeds)
    vis = np.asarray(scene_or_embeds, dtype=np.float64)
    if vis.shape != (model.n_vis, model.cfg.width):
        raise ShapeError(f"visual embeddings must be {(model.n_vis, model.cfg.width)}, got {vis.shape}")
    return vis


def forward_prefill(model, scene_or_embeds, prompt, hook=None, capacity=None):
    """Encode the visual prefix and the prompt.

    Returns ``(StepOutput, cache)``; the output's per-row arrays keep only
    the last prompt row (the one that predicts the first token).
    """
    prompt = list(prompt)
    if not prompt:
        raise ConfigError("prompt must be non-empty")
    vis = _visual_input(model, scene_or_embeds)
    cache = Cache(model, capacity or (model.n_vis + len(prompt) + 80))
    _forward_visual(model, vis, cache)
    x = model.embed_tokens(prompt, 0)
    n = len(prompt)
    out = _forward_text(model, x, cache, np.tril(np.ones((n, n), dtype=bool)), hook, Phase.PREFILL)
    cache.append(out.k_new, out.v_new)
    last = slice(n - 1, n)
    return StepOutput(out.logits[last], out.vis_attn[:, :, last], out.vis_scores[:, :, last]), cache


def forward_step(model, tokens, cache, hook=None, phase=Phase.DECODE):
    """One decode position for ``len(tokens)`` parallel branches.

    All branches share ``cache`` as their prefix and differ only in the
    token at the current position; each attends to the prefix plus its own
    token.  The cache is not modified; commit with
    ``cache.append(out.k_new[:, :, [b]], out.v_new[:, :, [b]])``.
    """
    tokens = list(tokens)
    if cache.n_vis != model.n_vis or cache.length < model.n_vis:
        raise InternalStateError("cache does not hold the visual prefix")
    x = model.embed_tokens(tokens, cache.text_position, parallel=True)
    return _forward_text(model, x, cache, np.eye(len(tokens), dtype=bool), hook, phase)


def token_probs(logits):
    return softmax_rows(np.atleast_2d(logits))


def greedy_decode(model, scene_or_embeds, prompt, max_tokens=64, suppress_eos=False):
    """Plain greedy decoding with no hooks; EOS is not included in the output."""
    out, cache = forward_prefill(model, scene_or_embeds, prompt)
    tokens = []
    while True:
        p = token_probs(out.logits)[0]
        if suppress_eos:
            p = p.copy()
            p[EOS] = 0.0
        t = int(np.argmax(p))
        if t == EOS:
            break
        tokens.append(t)
        if len(tokens) >= max_tokens:
            break
        out = forward_step(model, [t], cache)
        cache.append(out.k_new, out.v_new)
    return tokens


class SyntheticScene:
    """A planted-object grid; ``-1`` marks an empty cell."""

    def __init__(self, grid, seed=None):
        grid = np.array(grid, dtype=np.int64)
        if grid.ndim != 2 or grid.size == 0:
            raise ConfigError(f"scene grid must be a non-empty 2-D array, got shape {grid.shape}")
        if (grid < -1).any():
            raise ConfigError("object ids must be >= 0 (or -1 for empty)")
        grid.setflags(write=False)
        self.grid = grid
        self.seed = seed

    @property
    def shape(self):
        return self.grid.shape

    @property
    def objects_present(self):
        return frozenset(int(o) for o in np.unique(self.grid) if o >= 0)

    def region(self, obj):
        """Row-major indices of the cells holding ``obj``."""
        return frozenset(np.flatnonzero(self.grid.reshape(-1) == obj).tolist())

    def to_dict(self):
        return {"grid": self.grid.tolist(), "seed": self.seed}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["grid"], doc.get("seed"))

    def __eq__(self, other):
        return isinstance(other, SyntheticScene) and np.array_equal(self.grid, other.grid)

    def __hash__(self):
        return hash(self.grid.tobytes())

    def __repr__(self):
        return f"SyntheticScene(objects={sorted(self.objects_present)}, seed={self.seed})"


def generate_scene(H, W, pool, density, seed):
    """Place objects from ``pool`` on ``round(density * H * W)`` cells (at least one)."""
    pool = sorted(set(int(p) for p in pool))
    if H < 1 or W < 1:
        raise ConfigError(f"degenerate grid {H}x{W}")
    if not pool:
        raise ConfigError("object pool is empty")
    if not 0.0 < density <= 1.0:
        raise ConfigError(f"density must lie in (0, 1], got {density}")
    rng = np.random.default_rng(seed)
    n_cells = H * W
    n_occ = max(1, int(round(density * n_cells)))
    cells = rng.permutation(n_cells)[:n_occ]
    n_distinct = int(rng.integers(1, min(len(pool), n_occ) + 1))
    objs = rng.permutation(pool)[:n_distinct]
    labels = np.concatenate([objs, rng.choice(objs, size=n_occ - n_distinct)])
    labels = rng.permutation(labels)
    grid = np.full(n_cells, -1, dtype=np.int64)
    grid[cells] = labels
    return SyntheticScene(grid.reshape(H, W), seed)


def scene_for(model, seed, density=0.25):
    """Scene sized to ``model``'s grid drawing from all of its objects."""
    H, W = model.cfg.grid
    return generate_scene(H, W, range(model.cfg.n_objects), density, seed)
