"""Diffusion schedule, gated noise prediction, sampling, and training steps.

The forward process is the standard variance-preserving one: a clean image
``y0`` diffused to timestep t is ``sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps``
with ``abar`` the cumulative product of (1 - beta) over a linear beta ramp.
Training minimizes mean squared error between predicted and true noise.

Sampling runs an ancestral update over a strided subset of timesteps; all
noise comes from one seeded generator, so a (config, seed) pair fully
determines the output. Classifier-free guidance mixes a conditional and an
unconditional prediction; the unconditional branch uses the negative prompt
and no identity tokens.

``GatingConfig`` scales or disables the identity branch per block category
(down/mid/up) and per sampling-step window, which is how identity influence
is localized to structure vs appearance stages at inference time.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .denoiser import BLOCK_CATEGORIES, UNetDenoiser
from .tensor import Tensor

__all__ = [
    "NoiseSchedule",
    "GatingConfig",
    "forward_diffuse",
    "noise_prediction_loss",
    "cfg_combine",
    "predict_noise",
    "sample",
    "multi_person_sample",
    "training_step",
    "AttentionRecorder",
    "DEFAULT_NEGATIVE_PROMPT",
]

DEFAULT_NEGATIVE_PROMPT = (
    "disfigured, deformed, three arms, three legs, fused fingers, cloned face, "
    "bad proportions, bad anatomy"
)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, num_timesteps: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        if num_timesteps < 1:
            raise ValueError(f"num_timesteps must be positive, got {num_timesteps}")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        betas = np.linspace(beta_start, beta_end, num_timesteps, dtype=np.float64)
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))

    @property
    def num_timesteps(self) -> int:
        return len(self.betas)


def forward_diffuse(y0: np.ndarray, t: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Diffuse clean images (B, C, H, W) to integer timesteps t (B,)."""
    y0 = np.asarray(y0)
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= schedule.num_timesteps):
        raise ValueError(f"timesteps out of range [0, {schedule.num_timesteps})")
    abar = schedule.alpha_bars[t].reshape(-1, *([1] * (y0.ndim - 1)))
    return (np.sqrt(abar) * y0 + np.sqrt(1.0 - abar) * eps).astype(y0.dtype)


def noise_prediction_loss(eps_hat: Tensor, eps: np.ndarray) -> Tensor:
    """Mean squared error over every element of the noise target."""
    diff = eps_hat - Tensor(np.asarray(eps, dtype=eps_hat.dtype))
    return (diff * diff).mean()


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, guidance_scale: float) -> np.ndarray:
    """eps_uncond + s * (eps_cond - eps_uncond)."""
    return eps_uncond + guidance_scale * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class GatingConfig:
    """Identity-branch gate: scale, active block categories, active step window.

    ``active_steps`` is a half-open [start, stop) range over sampling-step
    indices (0 = highest noise), or None for all steps.
    """

    identity_scale: float = 0.7
    active_blocks: frozenset = field(default_factory=lambda: frozenset(BLOCK_CATEGORIES))
    active_steps: tuple[int, int] | None = None

    def __post_init__(self):
        blocks = frozenset(self.active_blocks)
        object.__setattr__(self, "active_blocks", blocks)
        unknown = blocks - set(BLOCK_CATEGORIES)
        if unknown:
            raise ValueError(f"unknown block categories {sorted(unknown)}")
        if self.identity_scale < 0:
            raise ValueError(f"identity_scale must be >= 0, got {self.identity_scale}")

    def validate_steps(self, total_steps: int) -> None:
        if self.active_steps is None:
            return
        lo, hi = self.active_steps
        if not (0 <= lo < hi <= total_steps):
            raise ValueError(f"active_steps {self.active_steps} not within [0, {total_steps})")

    def weights_at(self, step_index: int) -> dict[str, float]:
        """Per-category identity weights for one sampling step."""
        if self.active_steps is not None:
            lo, hi = self.active_steps
            if not (lo <= step_index < hi):
                return dict.fromkeys(BLOCK_CATEGORIES, 0.0)
        return {cat: (self.identity_scale if cat in self.active_blocks else 0.0) for cat in BLOCK_CATEGORIES}

    def fully_off(self) -> bool:
        return self.identity_scale == 0.0 or not self.active_blocks


class AttentionRecorder:
    """Accumulates text cross-attention maps at one resolution over a window
    of sampling steps. Callable with (category, resolution, weights)."""

    def __init__(self, resolution: int):
        self.resolution = resolution
        self.sum: np.ndarray | None = None
        self.count = 0
        self.enabled = False

    def __call__(self, category: str, resolution: int, weights: np.ndarray) -> None:
        if not self.enabled or resolution != self.resolution:
            return
        # average over batch and heads: (B, heads, HW, L_text) -> (HW, L_text)
        flat = weights.mean(axis=(0, 1))
        self.sum = flat if self.sum is None else self.sum + flat
        self.count += 1

    def mean_map(self) -> np.ndarray:
        if self.sum is None or self.count == 0:
            raise RuntimeError("no attention maps recorded")
        return self.sum / self.count


def predict_noise(
    denoiser: UNetDenoiser,
    x: np.ndarray,
    t: np.ndarray,
    text_tokens: np.ndarray,
    id_tokens: Tensor | None,
    gating: GatingConfig,
    step_index: int = 0,
    id_masks: dict[int, np.ndarray] | None = None,
    probe=None,
) -> np.ndarray:
    """One gated denoiser evaluation, numpy in / numpy out."""
    if id_tokens is None or gating.fully_off():
        weights = None
        id_tokens = None
    else:
        weights = gating.weights_at(step_index)
        if all(v == 0.0 for v in weights.values()):
            weights = None
            id_tokens = None
    out = denoiser.forward(
        x, t, text_tokens, id_tokens=id_tokens, id_weights=weights, id_masks=id_masks, probe=probe
    )
    return out.data


def sampling_timesteps(num_timesteps: int, steps: int) -> np.ndarray:
    """Strided, strictly decreasing timestep subset ending at 0."""
    if not (1 <= steps <= num_timesteps):
        raise ValueError(f"steps must be in [1, {num_timesteps}], got {steps}")
    return np.unique(np.linspace(0, num_timesteps - 1, steps).round().astype(np.int64))[::-1]


def sample(
    denoiser: UNetDenoiser,
    schedule: NoiseSchedule,
    text_tokens: np.ndarray,
    id_tokens: Tensor | None,
    gating: GatingConfig,
    seed: int,
    steps: int = 50,
    guidance_scale: float = 1.0,
    uncond_text_tokens: np.ndarray | None = None,
    id_masks: dict[int, np.ndarray] | None = None,
    probe=None,
) -> np.ndarray:
    """Generate one image; returns (H, W, 3) float32 in [0, 1].

    Ancestral updates with the full posterior noise scale; the predicted clean
    image is clamped to the valid range each step. With guidance_scale 1 the
    unconditional branch is never evaluated.
    """
    gating.validate_steps(steps)
    cfg = denoiser.config
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, cfg.in_channels, cfg.image_size, cfg.image_size)).astype(np.float32)
    ts = sampling_timesteps(schedule.num_timesteps, steps)
    use_cfg = guidance_scale != 1.0
    if use_cfg and uncond_text_tokens is None:
        raise ValueError("guidance_scale != 1 requires unconditional text tokens")

    for step_index, t in enumerate(ts):
        t_batch = np.array([t], dtype=np.int64)
        eps = predict_noise(
            denoiser, x, t_batch, text_tokens, id_tokens, gating, step_index, id_masks, probe
        )
        if use_cfg:
            eps_uncond = predict_noise(
                denoiser, x, t_batch, uncond_text_tokens, None, gating, step_index
            )
            eps = cfg_combine(eps, eps_uncond, guidance_scale)

        abar_t = schedule.alpha_bars[t]
        abar_prev = schedule.alpha_bars[ts[step_index + 1]] if step_index + 1 < len(ts) else 1.0
        x0 = (x - np.sqrt(1.0 - abar_t) * eps) / np.sqrt(abar_t)
        x0 = np.clip(x0, -1.0, 1.0)
        sigma = np.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * np.sqrt(1.0 - abar_t / abar_prev)
        direction = np.sqrt(max(1.0 - abar_prev - sigma ** 2, 0.0)) * eps
        x = np.sqrt(abar_prev) * x0 + direction
        if sigma > 0:
            x = x + sigma * rng.standard_normal(x.shape)
        x = x.astype(np.float32)

    image = np.clip((x[0].transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0)
    return image.astype(np.float32)


def training_step(
    denoiser: UNetDenoiser,
    identity_decoder,
    batch: dict,
    optimizer,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    identity_scale: float = 1.0,
) -> float:
    """One optimization step of the identity-conditioned objective.

    ``batch`` carries ``images`` (B, H, W, 3) in [0, 1], ``text_tokens``
    (B, l_T, d_T), region ``features`` (B, N, T, d_F), and ``present``
    (N,) flags shared by the batch. The denoiser and everything upstream of
    ``features`` are expected to be frozen; only unfrozen parameters move.

    Raises if the loss goes non-finite (divergence must abort, not continue).
    """
    from .identity import stack_embeddings

    images = np.asarray(batch["images"], dtype=np.float32)
    y0 = (images * 2.0 - 1.0).transpose(0, 3, 1, 2)
    b = y0.shape[0]
    t = rng.integers(0, schedule.num_timesteps, size=b)
    eps = rng.standard_normal(y0.shape).astype(np.float32)
    z = forward_diffuse(y0, t, eps, schedule)

    hidden = identity_decoder.forward(batch["features"])
    stacked = stack_embeddings(hidden, batch["present"])
    weights = dict.fromkeys(BLOCK_CATEGORIES, float(identity_scale))
    eps_hat = denoiser.forward(z, t, batch["text_tokens"], id_tokens=stacked.tokens, id_weights=weights)
    loss = noise_prediction_loss(eps_hat, eps)
    value = float(loss.data)
    if not np.isfinite(value):
        raise RuntimeError(f"training loss diverged: {value}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return value


def base_training_step(
    denoiser: UNetDenoiser,
    batch: dict,
    optimizer,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> float:
    """Text-to-image pretraining step: no identity branch at all."""
    images = np.asarray(batch["images"], dtype=np.float32)
    y0 = (images * 2.0 - 1.0).transpose(0, 3, 1, 2)
    b = y0.shape[0]
    t = rng.integers(0, schedule.num_timesteps, size=b)
    eps = rng.standard_normal(y0.shape).astype(np.float32)
    z = forward_diffuse(y0, t, eps, schedule)
    eps_hat = denoiser.forward(z, t, batch["text_tokens"])
    loss = noise_prediction_loss(eps_hat, eps)
    value = float(loss.data)
    if not np.isfinite(value):
        raise RuntimeError(f"training loss diverged: {value}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return value


# -- multi-person composition --------------------------------------------------


def _majority_3x3(mask: np.ndarray) -> np.ndarray:
    """One pass of 3x3 majority voting to clean up a boolean grid."""
    padded = np.pad(mask.astype(np.int32), 1)
    votes = sum(
        padded[1 + dy : 1 + dy + mask.shape[0], 1 + dx : 1 + dx + mask.shape[1]]
        for dy in (-1, 0, 1)
        for dx in (-1, 0, 1)
    )
    return votes >= 5


def _nearest_resize_bool(mask: np.ndarray, side: int) -> np.ndarray:
    src = mask.shape[0]
    idx = np.minimum((np.arange(side) * src) // side, src - 1)
    return mask[np.ix_(idx, idx)]


def person_masks_from_attention(
    mean_map: np.ndarray, token_indices: list[int], resolution: int
) -> list[np.ndarray]:
    """Threshold per-person text-attention maps at mean + 1 std.

    ``mean_map`` is (HW, L_text) averaged over heads and steps. Returns
    boolean (resolution, resolution) grids, cleaned with one majority vote.
    """
    masks = []
    for idx in token_indices:
        column = mean_map[:, idx]
        threshold = column.mean() + column.std()
        grid = (column >= threshold).reshape(resolution, resolution)
        masks.append(_majority_3x3(grid))
    return masks


def build_identity_attention_masks(
    person_masks: list[np.ndarray],
    spans: list[tuple[int, int]],
    resolutions: list[int],
    dtype=np.float32,
) -> dict[int, np.ndarray]:
    """Additive masks restricting identity attention per person.

    ``spans`` gives each person's half-open token range in the concatenated
    identity sequence. A query inside exactly one person's region may only
    attend to that person's tokens; queries outside every region see all
    tokens.
    """
    total = max(hi for _, hi in spans)
    out: dict[int, np.ndarray] = {}
    for res in resolutions:
        grids = [_nearest_resize_bool(m, res).reshape(-1) for m in person_masks]
        mask = np.zeros((1, 1, res * res, total), dtype=dtype)
        for q in range(res * res):
            owners = [p for p, g in enumerate(grids) if g[q]]
            if not owners:
                continue
            allowed = np.zeros(total, dtype=bool)
            for p in owners:
                lo, hi = spans[p]
                allowed[lo:hi] = True
            mask[0, 0, q, ~allowed] = -np.inf
        out[res] = mask
    return out


def multi_person_sample(
    denoiser: UNetDenoiser,
    schedule: NoiseSchedule,
    text_tokens: np.ndarray,
    persons: list[dict],
    gating: GatingConfig,
    seed: int,
    steps: int = 50,
    guidance_scale: float = 1.0,
    uncond_text_tokens: np.ndarray | None = None,
    person_masks: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Compose several identities in one image.

    Each entry of ``persons`` carries ``tokens`` (its stacked identity
    embedding, Tensor or array) and ``prompt_token_index`` (which text token
    names that person). Identity sequences are concatenated; a first unmasked
    pass localizes each person from text cross-attention (averaged over the
    last quarter of steps at the finest attention resolution), then a second
    pass restricts identity attention to those regions. Caller-provided
    ``person_masks`` (boolean image-space grids) skip the first pass.

    With a single person and no masks this is exactly ``sample``.
    """
    if not persons:
        raise ValueError("multi_person_sample needs at least one person")
    pieces = []
    spans = []
    cursor = 0
    for person in persons:
        tok = person["tokens"]
        arr = tok.data if isinstance(tok, Tensor) else np.asarray(tok, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[0]
        pieces.append(arr)
        spans.append((cursor, cursor + arr.shape[0]))
        cursor += arr.shape[0]
    id_tokens = Tensor(np.concatenate(pieces, axis=0))

    if len(persons) == 1 and person_masks is None:
        return sample(
            denoiser, schedule, text_tokens, id_tokens, gating, seed, steps,
            guidance_scale, uncond_text_tokens,
        )

    resolutions = sorted({b.resolution for b in denoiser.attention_blocks()})
    finest = max(resolutions)

    if person_masks is None:
        text_len = text_tokens.shape[-2]
        indices = [p["prompt_token_index"] for p in persons]
        if any(i < 0 or i >= text_len for i in indices):
            warnings.warn("person token index outside the prompt; composing without masks")
            return sample(
                denoiser, schedule, text_tokens, id_tokens, gating, seed, steps,
                guidance_scale, uncond_text_tokens,
            )
        recorder = AttentionRecorder(finest)

        class _LateWindowProbe:
            """Enable recording only for the last quarter of steps."""

            def __init__(self, total):
                self.start = (3 * total) // 4
                self.step = 0

            def begin_step(self, index):
                recorder.enabled = index >= self.start

        window = _LateWindowProbe(steps)

        def probe(category, resolution, weights):
            recorder(category, resolution, weights)

        # run pass 1 manually to know the step index at probe time
        gating.validate_steps(steps)
        rng = np.random.default_rng(seed)
        cfg = denoiser.config
        x = rng.standard_normal((1, cfg.in_channels, cfg.image_size, cfg.image_size)).astype(np.float32)
        ts = sampling_timesteps(schedule.num_timesteps, steps)
        for step_index, t in enumerate(ts):
            window.begin_step(step_index)
            t_batch = np.array([t], dtype=np.int64)
            eps = predict_noise(denoiser, x, t_batch, text_tokens, id_tokens, gating, step_index, None, probe)
            if guidance_scale != 1.0:
                eps_u = predict_noise(denoiser, x, t_batch, uncond_text_tokens, None, gating, step_index)
                eps = cfg_combine(eps, eps_u, guidance_scale)
            abar_t = schedule.alpha_bars[t]
            abar_prev = schedule.alpha_bars[ts[step_index + 1]] if step_index + 1 < len(ts) else 1.0
            x0 = np.clip((x - np.sqrt(1.0 - abar_t) * eps) / np.sqrt(abar_t), -1.0, 1.0)
            sigma = np.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * np.sqrt(1.0 - abar_t / abar_prev)
            x = np.sqrt(abar_prev) * x0 + np.sqrt(max(1.0 - abar_prev - sigma ** 2, 0.0)) * eps
            if sigma > 0:
                x = x + sigma * rng.standard_normal(x.shape)
            x = x.astype(np.float32)
        grids = person_masks_from_attention(recorder.mean_map(), indices, finest)
    else:
        if len(person_masks) != len(persons):
            raise ValueError(f"{len(person_masks)} masks for {len(persons)} persons")
        grids = [_nearest_resize_bool(np.asarray(m, dtype=bool), finest) for m in person_masks]

    id_masks = build_identity_attention_masks(grids, spans, resolutions)
    return sample(
        denoiser, schedule, text_tokens, id_tokens, gating, seed, steps,
        guidance_scale, uncond_text_tokens, id_masks=id_masks,
    )
