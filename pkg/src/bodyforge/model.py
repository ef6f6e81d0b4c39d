"""The assembled persona model: frozen feature encoder, trainable identity
decoder, and the gated denoiser, plus the freeze discipline the two training
phases rely on.

Base pretraining trains the denoiser's text pathway while the identity
projections and decoder stay frozen; persona training inverts that, training
only the identity decoder and the denoiser's identity key/value projections
while everything else (including the whole base denoiser) is byte-frozen.
``frozen_bytes_hash`` fingerprints exactly the parameters persona training
must never touch.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import DenoiserConfig, UNetDenoiser
from .diffusion import DEFAULT_NEGATIVE_PROMPT, GatingConfig, NoiseSchedule, sample
from .encoders import PatchEncoder, PatchEncoderConfig, TextEmbedderConfig, encode_text
from .identity import IdentityDecoder, IdentityDecoderConfig, StackedIdentityEmbedding, stack_embeddings
from .regions import NUM_REGIONS

__all__ = ["PersonaConfig", "PersonaModel", "config_hash", "save_model", "load_model"]

# Parameter-name fragments owned by the identity branch inside the denoiser.
_IDENTITY_PROJECTIONS = ("/id_key/", "/id_value/")


@dataclass(frozen=True)
class PersonaConfig:
    """One consistent parameterisation of all three submodules."""

    region_size: int = 64
    patch_size: int = 16
    feature_dim: int = 32
    encoder_depth: int = 2
    encoder_heads: int = 4
    token_len: int = 16
    identity_dim: int = 32
    decoder_depth: int = 2
    decoder_heads: int = 4
    text_tokens: int = 16
    text_dim: int = 32
    image_size: int = 64
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 2)
    attn_resolutions: tuple = (16,)
    denoiser_heads: int = 4
    norm_groups: int = 8

    @property
    def encoder(self) -> PatchEncoderConfig:
        return PatchEncoderConfig(
            image_size=self.region_size,
            patch_size=self.patch_size,
            dim=self.feature_dim,
            depth=self.encoder_depth,
            num_heads=self.encoder_heads,
        )

    @property
    def decoder(self) -> IdentityDecoderConfig:
        return IdentityDecoderConfig(
            num_regions=NUM_REGIONS,
            token_len=self.token_len,
            dim=self.identity_dim,
            feature_dim=self.feature_dim,
            depth=self.decoder_depth,
            num_heads=self.decoder_heads,
        )

    @property
    def text(self) -> TextEmbedderConfig:
        return TextEmbedderConfig(max_tokens=self.text_tokens, dim=self.text_dim)

    @property
    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(
            image_size=self.image_size,
            base_channels=self.base_channels,
            channel_mults=tuple(self.channel_mults),
            attn_resolutions=tuple(self.attn_resolutions),
            num_heads=self.denoiser_heads,
            text_dim=self.text_dim,
            identity_dim=self.identity_dim,
            norm_groups=self.norm_groups,
        )


def config_hash(config: PersonaConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class PersonaModel(nn.Module):
    def __init__(self, config: PersonaConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = PatchEncoder(config.encoder, rng)
        self.identity_decoder = IdentityDecoder(config.decoder, rng)
        self.denoiser = UNetDenoiser(config.denoiser, rng)

    # -- freeze discipline ------------------------------------------------

    def _is_identity_projection(self, name: str) -> bool:
        return any(tag in name for tag in _IDENTITY_PROJECTIONS)

    def freeze_for_base_training(self) -> None:
        """Trainable: the denoiser minus its identity projections."""
        self.encoder.set_frozen(True)
        self.identity_decoder.set_frozen(True)
        for name, param in self.denoiser.named_parameters():
            param.frozen = self._is_identity_projection(name)

    def freeze_for_persona_training(self) -> None:
        """Trainable: the identity decoder plus the denoiser's identity
        key/value projections; the base model is untouchable."""
        self.encoder.set_frozen(True)
        self.identity_decoder.set_frozen(False)
        for name, param in self.denoiser.named_parameters():
            param.frozen = not self._is_identity_projection(name)

    def trainable_parameters(self) -> list:
        return [p for p in self.parameters() if not p.frozen]

    def frozen_bytes_hash(self) -> str:
        """Fingerprint of the encoder plus the base denoiser (everything the
        persona phase must leave byte-identical)."""
        digest = hashlib.sha256()
        entries = [("encoder/" + n, p) for n, p in self.encoder.named_parameters()]
        entries += [
            ("denoiser/" + n, p)
            for n, p in self.denoiser.named_parameters()
            if not self._is_identity_projection(n)
        ]
        for name, param in sorted(entries):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(param.data).tobytes())
        return digest.hexdigest()

    # -- conditioning -----------------------------------------------------

    def region_features(self, region_sets: list) -> np.ndarray:
        """Encode decomposed regions to (B, N, T, d_F) frozen features."""
        regions = np.stack([np.asarray(rs.regions, dtype=np.float32) for rs in region_sets])
        b, n = regions.shape[:2]
        flat = regions.reshape(b * n, *regions.shape[2:])
        features = self.encoder.encode(flat)
        return features.reshape(b, n, *features.shape[1:])

    def identity_tokens(self, region_sets: list) -> StackedIdentityEmbedding:
        """Decode a batch of region sets to stacked identity tokens.

        All sets must share one presence pattern (token counts must line up
        across the batch)."""
        if not region_sets:
            raise ValueError("need at least one region set")
        present = np.asarray(region_sets[0].present, dtype=bool)
        for rs in region_sets[1:]:
            if not np.array_equal(np.asarray(rs.present, dtype=bool), present):
                raise ValueError("region sets in one batch must share a presence pattern")
        features = self.region_features(region_sets)
        hidden = self.identity_decoder.forward(features)
        return stack_embeddings(hidden, present)

    def prompt_tokens(self, prompt: str) -> np.ndarray:
        """(1, l_T, d_T) text conditioning for one prompt."""
        return encode_text(prompt, self.config.text).vectors[None]

    # -- generation ---------------------------------------------------------

    def generate(
        self,
        schedule: NoiseSchedule,
        prompt: str,
        region_set=None,
        gating: GatingConfig | None = None,
        seed: int = 0,
        steps: int = 50,
        guidance_scale: float = 1.0,
        negative_prompt: str = DEFAULT_NEGATIVE_PROMPT,
        id_masks: dict | None = None,
    ) -> np.ndarray:
        gating = gating if gating is not None else GatingConfig()
        id_tokens = None
        if region_set is not None and not gating.fully_off():
            id_tokens = self.identity_tokens([region_set]).tokens
        uncond = self.prompt_tokens(negative_prompt) if guidance_scale != 1.0 else None
        return sample(
            self.denoiser,
            schedule,
            self.prompt_tokens(prompt),
            id_tokens,
            gating,
            seed=seed,
            steps=steps,
            guidance_scale=guidance_scale,
            uncond_text_tokens=uncond,
            id_masks=id_masks,
        )


def save_model(path, model: PersonaModel, extra: dict | None = None) -> None:
    payload = dict(extra or {})
    payload["persona_config"] = asdict(model.config)
    save_checkpoint(path, model.state_dict(), config_hash(model.config), payload)


def load_model(path, seed: int = 0) -> tuple[PersonaModel, dict]:
    """Rebuild a PersonaModel from a checkpoint; returns (model, extra)."""
    arrays, header = load_checkpoint(path)
    extra = header.get("extra", {})
    stored = extra.get("persona_config")
    if stored is None:
        raise ValueError(f"{path}: checkpoint lacks a persona_config record")
    config = PersonaConfig(
        **{
            key: tuple(value) if isinstance(value, list) else value
            for key, value in stored.items()
        }
    )
    if header.get("config_hash") != config_hash(config):
        raise ValueError(f"{path}: config hash does not match its own config record")
    model = PersonaModel(config, seed=seed)
    model.load_state_dict(arrays)
    return model, extra
