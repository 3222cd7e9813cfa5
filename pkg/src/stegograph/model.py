"""Full detector: preprocessing -> (enhancement chain + graph attention) ->
backbone classifier, with ablation switches that drop either enhancement
stage.

With everything enabled the backbone consumes sfe2(sfe1(r)) + gal(r) where
r is the 30-channel residual stack; `no_sfe` feeds r + gal(r), `no_gal`
feeds the enhancement chain alone, and `neither` feeds r directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import BnState, Tensor
from . import preprocess as pre
from . import sfe as sfe_mod
from . import gal as gal_mod
from . import backbone as bb

ABLATIONS = ("full", "no_sfe", "no_gal", "neither")


@dataclass
class DetectorModel:
    height: int
    width: int
    ablation: str
    preprocess: pre.PreprocessParams
    sfe1: sfe_mod.SfeParams | None
    sfe2: sfe_mod.SfeParams | None
    gal: gal_mod.GalParams | None
    backbone: bb.BackboneParams

    def forward(self, planes: Tensor, training: bool) -> Tensor:
        """Pixel planes (N, 1, H, W) -> logits (N, 2)."""
        r = pre.preprocess_forward(planes, self.preprocess, training)
        x = r
        if self.sfe1 is not None:
            x = sfe_mod.sfe_forward(x, self.sfe1, training)
            x = sfe_mod.sfe_forward(x, self.sfe2, training)
        if self.gal is not None:
            x = x + gal_mod.gal_forward(r, self.gal, training)
        return bb.backbone_logits(x, self.backbone, training)

    def predict_proba(self, planes: np.ndarray) -> np.ndarray:
        """Inference-mode probabilities [p_cover, p_stego] per image."""
        logits = self.forward(Tensor(planes), training=False)
        return T.softmax_last(logits).data

    # -- parameter registry -------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        """Trainable tensors by name (insertion order fixed by construction)."""
        out: dict[str, Tensor] = {}
        for name, t in self._named_tensors():
            if isinstance(t, Tensor) and t.requires_grad:
                out[name] = t
        return out

    def named_state(self) -> dict[str, np.ndarray]:
        """Everything a checkpoint must carry (copied), including BN running
        stats and frozen filters."""
        out: dict[str, np.ndarray] = {}
        for name, t in self._named_tensors():
            out[name] = (t.data if isinstance(t, Tensor) else t).copy()
        return out

    def decay_names(self) -> set[str]:
        """Parameters that receive L2: conv/dense/attention weights only."""
        return {name for name, t in self._named_tensors()
                if isinstance(t, Tensor) and t.requires_grad
                and name.endswith((".weight", ".W", ".a"))}

    def _conv_bn_items(self, prefix: str, c: sfe_mod.ConvBn):
        yield f"{prefix}.weight", c.weight
        yield f"{prefix}.bias", c.bias
        yield from self._bn_items(f"{prefix}.bn", c.bn)

    def _bn_items(self, prefix: str, s: BnState):
        yield f"{prefix}.gamma", s.gamma
        yield f"{prefix}.beta", s.beta
        yield f"{prefix}.running_mean", s.running_mean
        yield f"{prefix}.running_var", s.running_var

    def _sfe_items(self, prefix: str, p: sfe_mod.SfeParams):
        for lname, layer in (("sfel_a", p.sfel_a), ("sfel_b", p.sfel_b)):
            yield from self._conv_bn_items(f"{prefix}.{lname}.conv1", layer.conv1)
            yield from self._conv_bn_items(f"{prefix}.{lname}.conv2", layer.conv2)
            yield from self._conv_bn_items(f"{prefix}.{lname}.shortcut", layer.shortcut)
        yield from self._conv_bn_items(f"{prefix}.fuse", p.fuse)

    def _named_tensors(self):
        yield "preprocess.srm.weight", self.preprocess.weight
        yield "preprocess.srm.bias", self.preprocess.bias
        yield from self._bn_items("preprocess.bn", self.preprocess.bn)
        if self.sfe1 is not None:
            yield from self._sfe_items("sfe1", self.sfe1)
            yield from self._sfe_items("sfe2", self.sfe2)
        if self.gal is not None:
            for lname, layer in (("layer1", self.gal.layer1), ("layer2", self.gal.layer2)):
                yield f"gal.{lname}.W", layer.W
                yield f"gal.{lname}.a", layer.a
        for i, block in enumerate(self.backbone.blocks, start=1):
            yield from self._conv_bn_items(f"backbone.block{i}.conv1", block.conv1)
            yield from self._conv_bn_items(f"backbone.block{i}.conv2", block.conv2)
            if block.shortcut is not None:
                yield from self._conv_bn_items(f"backbone.block{i}.shortcut", block.shortcut)
        yield "backbone.fc.W", self.backbone.fc

    # -- state restore ------------------------------------------------------

    def apply_state(self, state: dict[str, np.ndarray]) -> None:
        """Load named arrays; extras are ignored, missing names are an error."""
        own = dict(self._named_tensors())
        missing = [n for n in own if n not in state]
        if missing:
            raise ValueError(f"checkpoint lacks required parameters: {sorted(missing)[:5]}"
                             + ("..." if len(missing) > 5 else ""))
        dt = T.float_dtype()
        for name, holder in own.items():
            value = np.asarray(state[name], dtype=dt)
            if isinstance(holder, Tensor):
                if value.shape != holder.data.shape:
                    raise ValueError(f"shape conflict for {name}: checkpoint "
                                     f"{value.shape} vs model {holder.data.shape}")
                holder.data = value.copy()
            else:
                if value.shape != holder.shape:
                    raise ValueError(f"shape conflict for {name}")
        # running stats are plain arrays; rebind them on their BN states
        for name, s in self._bn_states():
            s.running_mean = np.asarray(state[f"{name}.running_mean"], dtype=dt).copy()
            s.running_var = np.asarray(state[f"{name}.running_var"], dtype=dt).copy()

    def _bn_states(self):
        yield "preprocess.bn", self.preprocess.bn
        if self.sfe1 is not None:
            for mname, m in (("sfe1", self.sfe1), ("sfe2", self.sfe2)):
                for lname, layer in (("sfel_a", m.sfel_a), ("sfel_b", m.sfel_b)):
                    yield f"{mname}.{lname}.conv1.bn", layer.conv1.bn
                    yield f"{mname}.{lname}.conv2.bn", layer.conv2.bn
                    yield f"{mname}.{lname}.shortcut.bn", layer.shortcut.bn
                yield f"{mname}.fuse.bn", m.fuse.bn
        for i, block in enumerate(self.backbone.blocks, start=1):
            yield f"backbone.block{i}.conv1.bn", block.conv1.bn
            yield f"backbone.block{i}.conv2.bn", block.conv2.bn
            if block.shortcut is not None:
                yield f"backbone.block{i}.shortcut.bn", block.shortcut.bn


def build_model(height: int, width: int, rng: np.random.Generator,
                ablation: str = "full", tlu_threshold: float = 3.0,
                freeze_srm: bool = False) -> DetectorModel:
    """Initialize a detector for a fixed input size.

    Filter kernels use He initialization with biases at 0.2; the residual
    bank comes from the handcrafted filter set; the attention map W is
    He-initialized with a ~ N(0, 0.01); the classifier weights are
    N(0, 0.01) with no bias.
    """
    if height % 16 or width % 16:
        raise ValueError("input dims must be divisible by 16")
    if ablation not in ABLATIONS:
        raise ValueError(f"ablation must be one of {ABLATIONS}, got {ablation!r}")
    p = pre.init_preprocess(pre.PreprocessConfig(T=tlu_threshold, freeze_srm=freeze_srm))
    use_sfe = ablation in ("full", "no_gal")
    use_gal = ablation in ("full", "no_sfe")
    sfe1 = sfe_mod.init_sfe(rng) if use_sfe else None
    sfe2 = sfe_mod.init_sfe(rng) if use_sfe else None
    gal = gal_mod.init_gal(rng, (height // 8) * (width // 8)) if use_gal else None
    backbone = bb.init_backbone(rng)
    return DetectorModel(height=height, width=width, ablation=ablation,
                         preprocess=p, sfe1=sfe1, sfe2=sfe2, gal=gal,
                         backbone=backbone)
