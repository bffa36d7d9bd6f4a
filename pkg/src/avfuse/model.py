"""Full two-stream model: tokenizers, frozen layers, adapter sites, head.

Every parameter draw uses an RNG stream keyed by the parameter's registry
name, so two models built from the same seed agree on every shared component
regardless of which adapter sites exist. That is what lets an adapted model
reproduce its frozen twin exactly at init.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Rng, ShapeError, Tensor, add, concat_cols, matmul, mean_rows
from .backbone import (
    AUDIO,
    VISUAL,
    FreezeRegistry,
    FrozenLayerWeights,
    ImageInput,
    SpectrogramInput,
    TokenSet,
    init_layer_weights,
    patch_embed,
    pad_to_multiple,
    resize_pos_table,
    spectrogram_embed,
)
from .fusion import MODES, LayerSites, build_layer_sites, dual_layer_forward
from .serialization import load_tensors, save_tensors

INIT_STD = 0.02


@dataclass
class ModelConfig:
    """Shape and wiring of one two-stream model."""

    layers: int = 2
    width: int = 32
    heads: int = 4
    patch: int = 4
    image_hw: tuple[int, int] = (8, 8)
    spec_hw: tuple[int, int] = (8, 8)
    latent_count: int = 2
    ratio: int = 4
    groups: int = 2
    mode: str = "bidirectional"
    use_latents: bool = True
    bottleneck_act: str = "gelu"
    bottleneck_bias: bool = True
    mlp_act: str = "gelu"
    audio_pos: str = "resize"  # "resize" | "none"
    include_head: bool = True

    def validate(self) -> None:
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.width < 1 or self.width % self.heads:
            raise ValueError(f"heads {self.heads} must divide width {self.width}")
        if self.patch < 1:
            raise ValueError(f"patch must be >= 1, got {self.patch}")
        if self.image_hw[0] % self.patch or self.image_hw[1] % self.patch:
            raise ValueError(f"image size {self.image_hw} must divide by patch {self.patch}")
        if self.latent_count < 1:
            raise ValueError(f"latent_count must be >= 1, got {self.latent_count}")
        if self.ratio < 1 or self.groups < 1 or self.width % (self.ratio * self.groups):
            raise ValueError(
                f"width {self.width} must divide by ratio*groups = {self.ratio * self.groups}"
            )
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.audio_pos not in ("resize", "none"):
            raise ValueError(f"audio_pos must be 'resize' or 'none', got {self.audio_pos!r}")

    @property
    def visual_grid(self) -> tuple[int, int]:
        return (self.image_hw[0] // self.patch, self.image_hw[1] // self.patch)

    @property
    def audio_grid(self) -> tuple[int, int]:
        m = -(-self.spec_hw[0] // self.patch)
        c = -(-self.spec_hw[1] // self.patch)
        return (m, c)

    @property
    def n_visual_tokens(self) -> int:
        g = self.visual_grid
        return g[0] * g[1]

    @property
    def n_audio_tokens(self) -> int:
        g = self.audio_grid
        return g[0] * g[1]


def event_head(xa: TokenSet, xv: TokenSet, weight: Tensor, bias: Tensor) -> Tensor:
    """Mean-pool each stream, concatenate, and map linearly to two logits."""
    if xa.width != xv.width:
        raise ShapeError(f"event_head: stream widths differ: {xa.width} vs {xv.width}")
    pooled = concat_cols([mean_rows(xa.tokens), mean_rows(xv.tokens)])
    if weight.shape != (2 * xa.width, 2):
        raise ShapeError(f"event_head: weight shape {weight.shape} does not match pooled width {2 * xa.width}")
    return add(matmul(pooled, weight), bias)


class TwoStreamModel:
    """A frozen backbone shared by both streams, per-layer adapter sites for
    the enabled directions, and a trainable linear event head."""

    def __init__(self, cfg: ModelConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = int(seed)
        self.registry = FreezeRegistry()

        width = cfg.width
        patch_dim = cfg.patch * cfg.patch * 3
        self.patch_proj = self.registry.register(
            "backbone.patch_proj",
            Tensor(Rng.for_name(seed, "backbone.patch_proj").normal((patch_dim, width), std=INIT_STD)),
            frozen=True,
        )
        self.pos_visual = self.registry.register(
            "backbone.pos_visual",
            Tensor(Rng.for_name(seed, "backbone.pos_visual").normal((cfg.n_visual_tokens, width), std=INIT_STD)),
            frozen=True,
        )

        self.layers: list[FrozenLayerWeights] = []
        for i in range(cfg.layers):
            w = init_layer_weights(width, cfg.heads, seed, f"backbone.layer{i}", mlp_act=cfg.mlp_act)
            self.layers.append(w)
            base = f"backbone.layer{i}"
            for part, tensor in (
                ("ln1_gain", w.ln1_gain),
                ("ln1_shift", w.ln1_shift),
                ("wq", w.wq),
                ("wk", w.wk),
                ("wv", w.wv),
                ("wo", w.wo),
                ("ln2_gain", w.ln2_gain),
                ("ln2_shift", w.ln2_shift),
                ("mlp_w1", w.mlp_w1),
                ("mlp_b1", w.mlp_b1),
                ("mlp_w2", w.mlp_w2),
                ("mlp_b2", w.mlp_b2),
            ):
                self.registry.register(f"{base}.{part}", tensor, frozen=True)

        self.sites: list[LayerSites] = []
        for i in range(cfg.layers):
            self.sites.append(
                build_layer_sites(
                    i,
                    width,
                    cfg.latent_count,
                    cfg.ratio,
                    cfg.groups,
                    seed,
                    cfg.mode,
                    use_latents=cfg.use_latents,
                    act=cfg.bottleneck_act,
                    bias=cfg.bottleneck_bias,
                    registry=self.registry,
                )
            )

        self.head_weight: Tensor | None = None
        self.head_bias: Tensor | None = None
        if cfg.include_head:
            self.head_weight = self.registry.register(
                "head.weight",
                Tensor(Rng.for_name(seed, "head.weight").normal((2 * width, 2), std=INIT_STD)),
                frozen=False,
            )
            self.head_bias = self.registry.register("head.bias", Tensor(np.zeros(2)), frozen=False)

        if cfg.audio_pos == "resize":
            self._pos_audio = Tensor(
                resize_pos_table(self.pos_visual.data, cfg.visual_grid, cfg.audio_grid)
            )
        else:
            self._pos_audio = None

    # -- forward ------------------------------------------------------------

    def tokenize(self, image: ImageInput, spec: SpectrogramInput) -> tuple[TokenSet, TokenSet]:
        cfg = self.cfg
        if image.pixels.shape[:2] != tuple(cfg.image_hw):
            raise ShapeError(f"image shape {image.pixels.shape[:2]} does not match config {cfg.image_hw}")
        padded = pad_to_multiple(spec.values, cfg.patch)
        want = (cfg.audio_grid[0] * cfg.patch, cfg.audio_grid[1] * cfg.patch)
        if padded.shape != want:
            raise ShapeError(f"spectrogram shape {spec.values.shape} does not match config {cfg.spec_hw}")
        xv = patch_embed(image, cfg.patch, self.patch_proj, self.pos_visual)
        xa = spectrogram_embed(spec, cfg.patch, self.patch_proj, self._pos_audio)
        return xa, xv

    def forward(self, image: ImageInput, spec: SpectrogramInput) -> tuple[TokenSet, TokenSet]:
        xa, xv = self.tokenize(image, spec)
        for w, sites in zip(self.layers, self.sites):
            xa, xv = dual_layer_forward(xa, xv, w, sites, self.cfg.mode)
        return xa, xv

    def logits(self, image: ImageInput, spec: SpectrogramInput) -> Tensor:
        if self.head_weight is None:
            raise ValueError("model was built without a head")
        xa, xv = self.forward(image, spec)
        return event_head(xa, xv, self.head_weight, self.head_bias)

    def logits_batch(self, pairs) -> Tensor:
        """Stack per-sample logits rows for a list of (image, spectrogram)."""
        from .autodiff import concat_rows

        rows = [self.logits(img, spec) for img, spec in pairs]
        return rows[0] if len(rows) == 1 else concat_rows(rows)

    # -- persistence --------------------------------------------------------

    def save_weights(self, base) -> None:
        save_tensors(base, self.registry.entries_for_save(), extra={"seed": self.seed})

    def load_weights(self, base) -> None:
        entries, _extra = load_tensors(base)
        self.registry.load_arrays(entries)

    def frozen_hash(self) -> str:
        return self.registry.state_hash(frozen_only=True)


def frozen_twin(cfg: ModelConfig, seed: int) -> TwoStreamModel:
    """The same model with every adapter site removed (mode 'none')."""
    return TwoStreamModel(replace(cfg, mode="none"), seed)
