"""Width-scaled progressive decomposition network and its training loop.

Layout: five global encoders (image, semantics, colour-ratio maps, mean
reflectance estimate, inverse shading estimate) feed three decoder groups:
a reflectance-edge decoder with a shared head emitting edge maps at full,
half and quarter resolution; joint initial reflectance/shading decoders
whose stages exchange previous outputs and are gated by edge features; and
a final correction stage that re-encodes the calibrated edge+reflectance
pair plus the initial shading and decodes the corrected outputs with
attention-gated skip connections.

All concat widths are derived from the channel ladder at build time and the
resolved wiring is dumped in the architecture report, which is the
authoritative description of the assembled graph.
"""

from __future__ import annotations

import hashlib
import json
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as losses_mod
from . import priors as priors_mod
from .autodiff import BatchNormState, Param, Tensor
from .errors import (
    CheckpointMismatch,
    InvalidConfig,
    ManifestEmpty,
    NonFiniteLoss,
    ShapeMismatch,
    SizeMismatch,
)
from .imagecore import ImageRGB, SegClass, SegmentMap, load_pfm, load_png, load_segments
from .losses import LossWeights
from .synthgen import load_manifest

K_MAX_SEGMENTS = 16
SEMANTIC_CHANNELS = K_MAX_SEGMENTS + 2  # one-hot plus wall/ceiling class masks
CCR_CHANNELS = 7  # six log-ratio maps plus the strength map
VALID_WIDTHS = (4, 8, 16, 32, 64)


@dataclass
class ModelConfig:
    base_width: int = 8
    input_size: int = 64
    stages: int = 5
    seed: int = 0
    no_priors: bool = False
    no_edge_module: bool = False
    image_edges: bool = False

    def __post_init__(self):
        if self.base_width not in VALID_WIDTHS:
            raise InvalidConfig(f"base_width must be one of {VALID_WIDTHS}")
        if self.input_size < 16 or self.input_size % 16:
            raise InvalidConfig("input_size must be a positive multiple of 16")
        if self.stages != 5:
            raise InvalidConfig("stages is fixed at 5")
        if not 0 <= self.seed < 2 ** 64:
            raise InvalidConfig("seed must fit in 64 bits")
        if self.no_edge_module and self.image_edges:
            raise InvalidConfig("no_edge_module and image_edges conflict")


def config_hash(cfg: ModelConfig) -> str:
    blob = json.dumps({"arch": "signet-v1", **asdict(cfg)}, sort_keys=True)
    return hashlib.sha256(blob.encode("ascii")).hexdigest()


@dataclass
class ForwardOutputs:
    edge_full: Tensor | None
    edge_half: Tensor | None
    edge_quarter: Tensor | None
    r_initial: Tensor
    s_initial: Tensor
    r_final: Tensor
    s_final: Tensor


# ---------------------------------------------------------------------------
# building blocks


class _ConvBNReLU:
    def __init__(self, net: "SigNet", name: str, cin: int, cout: int, k: int,
                 stride: int, pad: int, rng, bare: bool = False):
        self.name = name
        self.stride = stride
        self.pad = pad
        self.bare = bare  # head convs: no batchnorm / activation
        std = np.sqrt(2.0 / (cin * k * k))
        self.w = net._param(f"{name}.w", rng.normal(0.0, std, size=(cout, cin, k, k)))
        self.b = net._param(f"{name}.b", np.zeros(cout))
        if not bare:
            self.gamma = net._param(f"{name}.bn.gamma", np.ones(cout))
            self.beta = net._param(f"{name}.bn.beta", np.zeros(cout))
            self.bn = net._bn_state(f"{name}.bn", cout)
        net._report_layer(name, "conv", cin, cout, k, stride)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        y = ad.conv2d(x, self.w.tensor, self.b.tensor, stride=self.stride, pad=self.pad)
        if self.bare:
            return y
        y = ad.batchnorm2d(y, self.gamma.tensor, self.beta.tensor, self.bn, mode=mode)
        return ad.relu(y)


class _DeconvBNReLU:
    def __init__(self, net: "SigNet", name: str, cin: int, cout: int, rng,
                 k: int = 4, stride: int = 2, pad: int = 1):
        self.name = name
        self.stride = stride
        self.pad = pad
        std = np.sqrt(2.0 / (cin * k * k))
        self.w = net._param(f"{name}.w", rng.normal(0.0, std, size=(cin, cout, k, k)))
        self.b = net._param(f"{name}.b", np.zeros(cout))
        self.gamma = net._param(f"{name}.bn.gamma", np.ones(cout))
        self.beta = net._param(f"{name}.bn.beta", np.zeros(cout))
        self.bn = net._bn_state(f"{name}.bn", cout)
        net._report_layer(name, "deconv", cin, cout, k, stride)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        y = ad.deconv2d(x, self.w.tensor, self.b.tensor, stride=self.stride, pad=self.pad)
        y = ad.batchnorm2d(y, self.gamma.tensor, self.beta.tensor, self.bn, mode=mode)
        return ad.relu(y)


class _Encoder:
    """Five stages of (stride-1 conv, stride-2 conv); the last stage keeps
    stride 1 as the bottleneck. The stride-1 outputs of stages 1-4 are the
    skip features at full, 1/2, 1/4 and 1/8 resolution.

    A skips_only encoder stops after the stage-4 skip feature: the final
    correction module's edge encoder feeds only attention-gated skips, so
    its bottleneck stages would be unreachable by backprop."""

    def __init__(self, net: "SigNet", name: str, cin: int, ladder, rng,
                 skips_only: bool = False):
        self.name = name
        self.stages = []
        n_stages = 4 if skips_only else len(ladder)
        prev = cin
        for i in range(n_stages):
            width = ladder[i]
            conv_a = _ConvBNReLU(net, f"{name}.s{i + 1}a", prev, width, 3, 1, 1, rng)
            conv_b = None
            if not (skips_only and i == n_stages - 1):
                stride_b = 1 if i == len(ladder) - 1 else 2
                conv_b = _ConvBNReLU(net, f"{name}.s{i + 1}b", width, width, 3, stride_b, 1, rng)
            self.stages.append((conv_a, conv_b))
            prev = width

    def __call__(self, x: Tensor, mode: str):
        skips = []
        for i, (conv_a, conv_b) in enumerate(self.stages):
            a = conv_a(x, mode)
            if i < 4:
                skips.append(a)
            x = conv_b(a, mode) if conv_b is not None else a
        bottleneck = None if self.stages[-1][1] is None else x
        return skips, bottleneck  # skips[0] full res ... skips[3] at 1/8


class _Attention:
    """out = x * sigmoid(gate), with a 1x1 projection when channel counts differ."""

    def __init__(self, net: "SigNet", name: str, gate_ch: int, x_ch: int, rng):
        self.proj = None
        if gate_ch != x_ch:
            self.proj = _ConvBNReLU(net, f"{name}.proj", gate_ch, x_ch, 1, 1, 0, rng, bare=True)

    def __call__(self, gate: Tensor, x: Tensor, mode: str) -> Tensor:
        if self.proj is not None:
            gate = self.proj(gate, mode)
        return attention(gate, x)


def attention(gate: Tensor, x: Tensor) -> Tensor:
    """Elementwise attention gate; shapes must already agree."""
    if gate.values.shape != x.values.shape:
        raise ShapeMismatch(
            f"attention: gate {gate.values.shape} vs input {x.values.shape}")
    return ad.mul(x, ad.sigmoid(gate))


# ---------------------------------------------------------------------------
# the assembled network


class SigNet:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: "OrderedDict[str, Param]" = OrderedDict()
        self.bn_states: "OrderedDict[str, BatchNormState]" = OrderedDict()
        self._layers: list[dict] = []
        rng = np.random.default_rng([cfg.seed, 11])

        bw = cfg.base_width
        ladder = [bw, 2 * bw, 4 * bw, 8 * bw, 8 * bw]
        dec_out = [8 * bw, 8 * bw, 4 * bw, 2 * bw]
        self._ladder = ladder
        self._dec_out = dec_out
        bott = ladder[-1]

        has_edge = not cfg.no_edge_module
        learned_edge = has_edge and not cfg.image_edges
        self.has_edge = has_edge
        self.learned_edge = learned_edge

        enc_inputs = {"image": 3}
        if not cfg.no_priors:
            enc_inputs.update({"semantic": SEMANTIC_CHANNELS, "r_est": 3, "s_est": 1})
            if learned_edge:
                # colour-ratio features feed only the edge decoder
                enc_inputs["ccr"] = CCR_CHANNELS
        self.encoders = OrderedDict(
            (name, _Encoder(self, f"enc.{name}", cin, ladder, rng))
            for name, cin in enc_inputs.items())

        skip_ch = [ladder[3], ladder[2], ladder[1], ladder[0]]  # consumed by d2..d4, fuse

        if learned_edge:
            self.edge_d = [_DeconvBNReLU(self, "edge.d1", 3 * bott, dec_out[0], rng)]
            for j in range(1, 4):
                self.edge_d.append(_DeconvBNReLU(
                    self, f"edge.d{j + 1}", dec_out[j - 1] + 3 * skip_ch[j - 1], dec_out[j], rng))
            self.edge_fuse = _ConvBNReLU(
                self, "edge.fuse", dec_out[3] + 3 * skip_ch[3], bw, 3, 1, 1, rng)
            self.edge_head = _ConvBNReLU(self, "edge.head", bw, 1, 3, 1, 1, rng, bare=True)

        # initial estimation: joint reflectance/shading decoders
        gate_ch = [1 if cfg.image_edges else dec_out[j] for j in range(4)]
        self.init_r_d = [_DeconvBNReLU(self, "init_r.d1", 3 * bott, dec_out[0], rng)]
        self.init_s_d = [_DeconvBNReLU(self, "init_s.d1", 2 * bott, dec_out[0], rng)]
        for j in range(1, 4):
            self.init_r_d.append(_DeconvBNReLU(
                self, f"init_r.d{j + 1}",
                2 * dec_out[j - 1] + 3 * skip_ch[j - 1], dec_out[j], rng))
            self.init_s_d.append(_DeconvBNReLU(
                self, f"init_s.d{j + 1}",
                2 * dec_out[j - 1] + 2 * skip_ch[j - 1], dec_out[j], rng))
        self.init_r_fuse = _ConvBNReLU(
            self, "init_r.fuse", 2 * dec_out[3] + 3 * skip_ch[3], bw, 3, 1, 1, rng)
        self.init_s_fuse = _ConvBNReLU(
            self, "init_s.fuse", 2 * dec_out[3] + 2 * skip_ch[3], bw, 3, 1, 1, rng)
        self.init_r_head = _ConvBNReLU(self, "init_r.head", bw, 3, 3, 1, 1, rng, bare=True)
        self.init_s_head = _ConvBNReLU(self, "init_s.head", bw, 1, 3, 1, 1, rng, bare=True)
        if has_edge:
            self.init_att = [
                _Attention(self, f"init_r.att{j + 1}", gate_ch[j], dec_out[j], rng)
                for j in range(4)]
            self.att_head_r = _Attention(self, "init_r.att_head", 1, 3, rng)
            self.att_head_s = _Attention(self, "init_s.att_head", 1, 1, rng)

        # final correction
        calib_in = 3 + (1 if has_edge else 0)
        self.calib1 = _ConvBNReLU(self, "final.calib1", calib_in, 16, 1, 1, 0, rng, bare=True)
        self.calib2 = _ConvBNReLU(self, "final.calib2", 16, calib_in, 1, 1, 0, rng, bare=True)
        self.final_r_enc = _Encoder(self, "enc.final_r", calib_in, ladder, rng)
        self.final_s_enc = _Encoder(self, "enc.final_s", 1, ladder, rng)
        if has_edge:
            self.final_edge_enc = _Encoder(self, "enc.final_edge", 1, ladder, rng,
                                           skips_only=True)
            self.final_att = [
                _Attention(self, f"final.att{j + 1}", skip_ch[j], skip_ch[j], rng)
                for j in range(4)]
        n_skip = 2 if has_edge else 1
        self.final_r_d = [_DeconvBNReLU(self, "final_r.d1", bott, dec_out[0], rng)]
        self.final_s_d = [_DeconvBNReLU(self, "final_s.d1", bott, dec_out[0], rng)]
        for j in range(1, 4):
            cin = 2 * dec_out[j - 1] + n_skip * skip_ch[j - 1]
            self.final_r_d.append(_DeconvBNReLU(self, f"final_r.d{j + 1}", cin, dec_out[j], rng))
            self.final_s_d.append(_DeconvBNReLU(self, f"final_s.d{j + 1}", cin, dec_out[j], rng))
        fuse_in = 2 * dec_out[3] + n_skip * skip_ch[3]
        self.final_r_fuse = _ConvBNReLU(self, "final_r.fuse", fuse_in, bw, 3, 1, 1, rng)
        self.final_s_fuse = _ConvBNReLU(self, "final_s.fuse", fuse_in, bw, 3, 1, 1, rng)
        self.final_r_head = _ConvBNReLU(self, "final_r.head", bw, 3, 3, 1, 1, rng, bare=True)
        self.final_s_head = _ConvBNReLU(self, "final_s.head", bw, 1, 3, 1, 1, rng, bare=True)

        # head init: small weights so reflectance/shading outputs start near
        # their population means, and a positive shading bias so no ReLU
        # head starts dead
        for head in (self.init_r_head, self.init_s_head,
                     self.final_r_head, self.final_s_head):
            head.w.values = head.w.values * np.float32(0.1)
        for s_head in (self.init_s_head, self.final_s_head):
            s_head.b.values = np.full_like(s_head.b.values, 0.5)

    # -- registries ---------------------------------------------------------

    def _param(self, name: str, values) -> Param:
        if name in self.params:
            raise InvalidConfig(f"duplicate parameter {name}")
        p = Param(values)
        self.params[name] = p
        return p

    def _bn_state(self, name: str, channels: int) -> BatchNormState:
        state = BatchNormState(channels)
        self.bn_states[name] = state
        return state

    def _report_layer(self, name, kind, cin, cout, k, stride):
        self._layers.append({"name": name, "kind": kind, "in_channels": cin,
                             "out_channels": cout, "kernel": k, "stride": stride,
                             "params": cout * cin * k * k + cout})

    def parameter_count(self) -> int:
        return int(sum(p.values.size for p in self.params.values()))

    # -- forward ------------------------------------------------------------

    def _encode_all(self, xs: dict, mode: str) -> dict:
        outs = {name: enc(xs[name], mode) for name, enc in self.encoders.items()}
        # absent branches fall back to the image encoder's features
        for name in ("semantic", "ccr", "r_est", "s_est"):
            if name not in outs:
                outs[name] = outs["image"]
        return outs

    def forward(self, inputs: dict, mode: str = "train") -> ForwardOutputs:
        if mode not in ("train", "eval"):
            raise InvalidConfig(f"forward: bad mode {mode!r}")
        size = self.cfg.input_size
        xs = {}
        for name in self.encoders:
            if name not in inputs:
                raise SizeMismatch(f"forward: missing input {name!r}")
            arr = np.asarray(inputs[name])
            if arr.ndim != 4 or arr.shape[2] != size or arr.shape[3] != size:
                raise SizeMismatch(f"forward: input {name!r} has shape {arr.shape}")
            xs[name] = Tensor(arr)
        enc = self._encode_all(xs, mode)
        i_sk, i_b = enc["image"]
        s_sk, s_b = enc["semantic"]
        g_sk, g_b = enc["ccr"]
        re_sk, re_b = enc["r_est"]
        se_sk, se_b = enc["s_est"]

        edge_full = edge_half = edge_quarter = None
        gates = None
        head_gate = None
        edge_signal = None
        if self.learned_edge:
            e1 = self.edge_d[0](ad.concat([i_b, s_b, g_b]), mode)
            e2 = self.edge_d[1](ad.concat([e1, i_sk[3], re_sk[3], g_sk[3]]), mode)
            e3 = self.edge_d[2](ad.concat([e2, i_sk[2], re_sk[2], g_sk[2]]), mode)
            e4 = self.edge_d[3](ad.concat([e3, i_sk[1], re_sk[1], g_sk[1]]), mode)
            ef = self.edge_fuse(ad.concat([e4, i_sk[0], re_sk[0], g_sk[0]]), mode)
            logits_full = self.edge_head(ef, mode)
            logits_half = self.edge_head(ad.downsample2x(ef), mode)
            logits_quarter = self.edge_head(ad.downsample2x(ad.downsample2x(ef)), mode)
            edge_full = ad.sigmoid(logits_full)
            edge_half = ad.sigmoid(logits_half)
            edge_quarter = ad.sigmoid(logits_quarter)
            gates = [e1, e2, e3, e4]
            head_gate = logits_full
            edge_signal = edge_full
        elif self.cfg.image_edges:
            if "edge" not in inputs:
                raise SizeMismatch("forward: image_edges mode needs an 'edge' input")
            canny = Tensor(np.asarray(inputs["edge"]))
            half = ad.downsample2x(canny)
            quarter = ad.downsample2x(half)
            eighth = ad.downsample2x(quarter)
            edge_full, edge_half, edge_quarter = canny, half, quarter
            gates = [eighth, quarter, half, canny]
            head_gate = canny
            edge_signal = canny

        # initial estimation (joint decoders; reflectance side is edge-gated)
        rd = self.init_r_d[0](ad.concat([i_b, re_b, s_b]), mode)
        ra = self.init_att[0](gates[0], rd, mode) if self.has_edge else rd
        sd = self.init_s_d[0](ad.concat([i_b, se_b]), mode)
        for j in range(1, 4):
            idx = 4 - j  # skip feature consumed at this stage (1/8 -> 1/2 res)
            rd_next = self.init_r_d[j](
                ad.concat([ra, sd, i_sk[idx], re_sk[idx], s_sk[idx]]), mode)
            sd_next = self.init_s_d[j](
                ad.concat([sd, ra, i_sk[idx], se_sk[idx]]), mode)
            rd = rd_next
            ra = self.init_att[j](gates[j], rd, mode) if self.has_edge else rd
            sd = sd_next
        rf = self.init_r_fuse(ad.concat([ra, sd, i_sk[0], re_sk[0], s_sk[0]]), mode)
        sf = self.init_s_fuse(ad.concat([sd, ra, i_sk[0], se_sk[0]]), mode)
        r_logits = self.init_r_head(rf, mode)
        s_logits = self.init_s_head(sf, mode)
        if self.has_edge:
            r_logits = self.att_head_r(head_gate, r_logits, mode)
            s_logits = self.att_head_s(head_gate, s_logits, mode)
        r_initial = ad.sigmoid(r_logits)
        s_initial = ad.relu(s_logits)

        # final correction
        calib_in = ad.concat([edge_signal, r_initial]) if self.has_edge else r_initial
        cal = self.calib2(ad.relu(self.calib1(calib_in, mode)), mode)
        r_sk, r_b = self.final_r_enc(cal, mode)
        t_sk, t_b = self.final_s_enc(s_initial, mode)
        if self.has_edge:
            e_sk, _ = self.final_edge_enc(edge_signal, mode)
        fr = self.final_r_d[0](r_b, mode)
        fs = self.final_s_d[0](t_b, mode)
        for j in range(1, 4):
            idx = 4 - j
            extras_r = [r_sk[idx]]
            extras_s = [t_sk[idx]]
            if self.has_edge:
                gated = self.final_att[j - 1](e_sk[idx], r_sk[idx], mode)
                extras_r.append(gated)
                extras_s.append(gated)
            fr_next = self.final_r_d[j](ad.concat([fr, fs] + extras_r), mode)
            fs_next = self.final_s_d[j](ad.concat([fs, fr] + extras_s), mode)
            fr, fs = fr_next, fs_next
        extras_r = [r_sk[0]]
        extras_s = [t_sk[0]]
        if self.has_edge:
            gated = self.final_att[3](e_sk[0], r_sk[0], mode)
            extras_r.append(gated)
            extras_s.append(gated)
        frf = self.final_r_fuse(ad.concat([fr, fs] + extras_r), mode)
        fsf = self.final_s_fuse(ad.concat([fs, fr] + extras_s), mode)
        r_final = ad.sigmoid(self.final_r_head(frf, mode))
        s_final = ad.relu(self.final_s_head(fsf, mode))

        return ForwardOutputs(edge_full=edge_full, edge_half=edge_half,
                              edge_quarter=edge_quarter, r_initial=r_initial,
                              s_initial=s_initial, r_final=r_final, s_final=s_final)

    # -- reporting ----------------------------------------------------------

    def architecture_report(self) -> dict:
        skips = "image,r_est,ccr" if not self.cfg.no_priors else "image x3"
        wiring = {
            "encoder.skips": "stride-1 stage outputs at full/2/4/8 resolution",
            "edge.d1": "concat(bottlenecks: image, semantic, ccr)",
            "edge.d2-d4,fuse": f"prev + skips({skips})",
            "edge.head": "shared 3x3 conv over full/half/quarter trunk features",
            "init_r.d1": "concat(bottlenecks: image, r_est, semantic)",
            "init_r.d2-d4,fuse": "gated prev_r + prev_s + skips(image, r_est, semantic)",
            "init_s.d1": "concat(bottlenecks: image, s_est)",
            "init_s.d2-d4,fuse": "prev_s + gated prev_r + skips(image, s_est)",
            "init heads": "3x3 conv, gated by full-res edge logits, sigmoid/relu",
            "final.calibrator": "1x1 conv -> ReLU -> 1x1 conv on concat(edge, r_initial)",
            "final_r.d*": "prev_r + prev_s + final_r_enc skip + att(final_edge_enc skip, final_r_enc skip)",
            "final_s.d*": "prev_s + prev_r + final_s_enc skip + shared gated skip",
            "final heads": "3x3 conv, sigmoid (reflectance) / relu (shading)",
        }
        if not self.has_edge:
            for key in ("edge.d1", "edge.d2-d4,fuse", "edge.head"):
                wiring[key] = "absent (no_edge_module)"
            wiring["init heads"] = "3x3 conv, ungated"
            wiring["final_r.d*"] = "prev_r + prev_s + final_r_enc skip"
            wiring["final_s.d*"] = "prev_s + prev_r + final_s_enc skip"
            wiring["final.calibrator"] = "1x1 conv -> ReLU -> 1x1 conv on r_initial"
        elif self.cfg.image_edges:
            wiring["edge.d1"] = wiring["edge.d2-d4,fuse"] = wiring["edge.head"] = \
                "replaced by Canny edges of the input image"
        return {
            "config": asdict(self.cfg),
            "arch_hash": config_hash(self.cfg),
            "channel_ladder": self._ladder,
            "decoder_channels": self._dec_out,
            "encoders": list(self.encoders.keys()),
            "total_params": self.parameter_count(),
            "layers": self._layers,
            "wiring": wiring,
        }


def build(cfg: ModelConfig) -> SigNet:
    return SigNet(cfg)


# ---------------------------------------------------------------------------
# input preparation


def make_inputs(image: ImageRGB, segmap: SegmentMap | None,
                bundle: priors_mod.PriorBundle | None, cfg: ModelConfig) -> "OrderedDict[str, np.ndarray]":
    """Per-sample (C, H, W) float32 arrays for each encoder.

    Semantic input is a 16-channel one-hot label map (labels above 15 fold
    into channel 15) plus wall/ceiling class masks; the colour-ratio input
    is six log-ratio channels plus the strength map.
    """
    if image.height != cfg.input_size or image.width != cfg.input_size:
        raise SizeMismatch(
            f"make_inputs: image {image.height}x{image.width} vs input_size {cfg.input_size}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    out["image"] = image.data.transpose(2, 0, 1).astype(np.float32)

    if not cfg.no_priors:
        if segmap is None or bundle is None:
            raise SizeMismatch("make_inputs: priors required unless no_priors is set")
        if (segmap.height, segmap.width) != (image.height, image.width):
            raise SizeMismatch("make_inputs: segment map size mismatch")
        onehot = np.zeros((K_MAX_SEGMENTS, image.height, image.width), dtype=np.float32)
        folded = np.minimum(segmap.labels, K_MAX_SEGMENTS - 1)
        rows, cols = np.indices(folded.shape)
        onehot[folded, rows, cols] = 1.0
        wall = segmap.class_mask(SegClass.WALL).astype(np.float32)
        ceiling = segmap.class_mask(SegClass.CEILING).astype(np.float32)
        out["semantic"] = np.concatenate([onehot, wall[None], ceiling[None]])

        ccr = bundle.ccr
        ratio_maps = [ccr.m_rg, ccr.m_rb, ccr.m_gb]
        logs = [np.log(m[:, :, d]).astype(np.float32) for m in ratio_maps for d in (0, 1)]
        out["ccr"] = np.stack(logs + [ccr.strength.data])
        out["r_est"] = bundle.r_est.data.transpose(2, 0, 1).astype(np.float32)
        out["s_est"] = bundle.s_est.data[None].astype(np.float32)

    if cfg.image_edges:
        out["edge"] = priors_mod.canny_edges(image).data[None].astype(np.float32)
    return out


def stack_inputs(per_sample: list) -> dict:
    """Stack a list of make_inputs() dicts into batched (N, C, H, W) arrays."""
    keys = per_sample[0].keys()
    return {k: np.stack([s[k] for s in per_sample]) for k in keys}


def predict(net: SigNet, image: ImageRGB, segments: SegmentMap | None) -> ForwardOutputs:
    """Single-image eval-mode forward, computing priors on the fly."""
    bundle = None
    if not net.cfg.no_priors:
        if segments is None:
            raise SizeMismatch("predict: segments required unless no_priors is set")
        bundle = priors_mod.compute_bundle(image, segments)
    inputs = stack_inputs([make_inputs(image, segments, bundle, net.cfg)])
    return net.forward(inputs, mode="eval")


# ---------------------------------------------------------------------------
# checkpoints


def save_net(net: SigNet, path, extra_meta: dict | None = None) -> None:
    buffers = OrderedDict()
    for name, state in net.bn_states.items():
        buffers[f"{name}.mean"] = state.mean
        buffers[f"{name}.var"] = state.var
    meta = {"config": asdict(net.cfg), "arch_hash": config_hash(net.cfg)}
    if extra_meta:
        meta.update(extra_meta)
    ad.save_checkpoint(path, net.params, buffers, meta)


def net_from_checkpoint(path) -> tuple[SigNet, dict]:
    ckpt = ad.load_checkpoint(path)
    meta = ckpt["meta"]
    try:
        cfg = ModelConfig(**meta["config"])
    except (TypeError, KeyError) as exc:
        raise CheckpointMismatch(f"checkpoint config unreadable: {exc}") from exc
    if meta.get("arch_hash") != config_hash(cfg):
        raise CheckpointMismatch("architecture hash differs from checkpoint config")
    net = build(cfg)
    for name, p in net.params.items():
        if name not in ckpt["params"]:
            raise CheckpointMismatch(f"checkpoint lacks parameter {name}")
        entry = ckpt["params"][name]
        if tuple(entry["values"].shape) != tuple(p.values.shape):
            raise CheckpointMismatch(f"parameter {name} shape differs")
        p.values = entry["values"]
        p.m = entry["m"]
        p.v = entry["v"]
        p.step = entry["step"]
    for name, state in net.bn_states.items():
        state.mean = ckpt["buffers"][f"{name}.mean"]
        state.var = ckpt["buffers"][f"{name}.var"]
    return net, meta


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 2e-4
    batch: int = 4
    max_iters: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise InvalidConfig("TrainConfig: epochs and batch must be >= 1")
        if self.lr < 0:
            raise InvalidConfig("TrainConfig: lr must be >= 0")


def _load_training_sample(base: Path, row: dict, cfg: ModelConfig) -> dict:
    image = load_png(base / row["image"])
    gt_r_img = load_pfm(base / row["reflectance"])
    gt_s_img = load_pfm(base / row["shading"])
    segments = load_segments(base / row["segments"])
    bundle = None
    if not cfg.no_priors:
        bundle = priors_mod.compute_bundle(image, segments)
    pyramid = priors_mod.canny_edge_pyramid(gt_r_img)
    return {
        "inputs": make_inputs(image, segments, bundle, cfg),
        "gt_r": gt_r_img.data.transpose(2, 0, 1).astype(np.float32),
        "gt_s": gt_s_img.data[None].astype(np.float32),
        "image": image.data.transpose(2, 0, 1).astype(np.float32),
        "pyramid": [lvl.data[None].astype(np.float32) for lvl in pyramid],
        "segments": segments,
    }


def _batch_losses(net: SigNet, batch: list, mode: str, weights: LossWeights):
    inputs = stack_inputs([s["inputs"] for s in batch])
    outputs = net.forward(inputs, mode=mode)
    gt_r = np.stack([s["gt_r"] for s in batch])
    gt_s = np.stack([s["gt_s"] for s in batch])
    image = np.stack([s["image"] for s in batch])
    segmaps = [s["segments"] for s in batch]

    if net.learned_edge:
        pyr = [np.stack([s["pyramid"][lvl] for s in batch]) for lvl in range(3)]
        l_e = losses_mod.edge_loss(
            [outputs.edge_full, outputs.edge_half, outputs.edge_quarter], pyr)
    else:
        l_e = 0.0
    l_i = losses_mod.initial_loss(outputs.r_initial, outputs.s_initial, gt_r, gt_s)
    l_f = losses_mod.final_loss(outputs.r_final, outputs.s_final, gt_r, gt_s, image)
    l_norm = losses_mod.norm_invariance_loss(outputs.r_final, image, segmaps)
    l_tv = losses_mod.tv_loss(outputs.r_final, gt_r, segmaps)
    l_dssim = ad.add(losses_mod.dssim_loss(outputs.r_final, ad.as_tensor(gt_r)),
                     losses_mod.dssim_loss(outputs.s_final, ad.as_tensor(gt_s)))
    return losses_mod.total_loss(l_e, l_i, l_f, l_norm, l_tv, l_dssim, weights)


_LOG_KEYS = ("L_e", "L_i", "L_f", "L_Norm", "L_TV", "L_dssim")


def train_loop(net: SigNet, manifest_path, train_cfg: TrainConfig, out_dir,
               weights: LossWeights | None = None, resume_from=None) -> dict:
    """End-to-end training; deterministic given the config seeds.

    Writes `architecture.json`, a JSON-lines `loss_log.jsonl` (one line per
    iteration) and a rolling `checkpoint.ckpt` at every epoch boundary and
    at the final iteration. Resuming from a checkpoint continues the exact
    iteration sequence of an uninterrupted run (shuffling is a pure
    function of (seed, epoch)).
    """
    weights = weights or LossWeights()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest, base = load_manifest(manifest_path)
    rows = [r for r in manifest["samples"] if r["split"] == "train"]
    if not rows:
        raise ManifestEmpty("train_loop: no training samples in manifest")
    samples = [_load_training_sample(base, row, net.cfg) for row in rows]

    with open(out_dir / "architecture.json", "w", encoding="ascii") as fh:
        json.dump(net.architecture_report(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    start_iter = 0
    if resume_from is not None:
        loaded, meta = net_from_checkpoint(resume_from)
        if config_hash(loaded.cfg) != config_hash(net.cfg):
            raise CheckpointMismatch("resume checkpoint was built for another config")
        for name, p in loaded.params.items():
            net.params[name].values = p.values
            net.params[name].m = p.m
            net.params[name].v = p.v
            net.params[name].step = p.step
        for name, state in loaded.bn_states.items():
            net.bn_states[name].mean = state.mean
            net.bn_states[name].var = state.var
        start_iter = int(meta.get("iter", 0))

    n = len(samples)
    per_epoch = (n + train_cfg.batch - 1) // train_cfg.batch
    ckpt_path = out_dir / "checkpoint.ckpt"
    log_path = out_dir / "loss_log.jsonl"
    started = time.monotonic()
    iteration = start_iter
    stop = False

    def total_iters() -> int:
        planned = train_cfg.epochs * per_epoch
        return min(planned, train_cfg.max_iters) if train_cfg.max_iters else planned

    def write_ckpt(epoch: int) -> None:
        save_net(net, ckpt_path, extra_meta={
            "iter": iteration, "epoch": epoch,
            "train": asdict(train_cfg), "weights": asdict(weights)})

    with open(log_path, "w", encoding="ascii") as log:
        first_epoch = start_iter // per_epoch
        for epoch in range(first_epoch, train_cfg.epochs):
            order = np.random.default_rng([net.cfg.seed, 0xE0, epoch]).permutation(n)
            batches = [order[i:i + train_cfg.batch] for i in range(0, n, train_cfg.batch)]
            skip = start_iter - epoch * per_epoch if epoch == first_epoch else 0
            for batch_idx in batches[max(0, skip):]:
                batch = [samples[i] for i in batch_idx]
                report = _batch_losses(net, batch, "train", weights)
                if not np.isfinite(report.total):
                    raise NonFiniteLoss(f"non-finite loss at iteration {iteration + 1}")
                report.tensor.backward()
                ad.adam_step(net.params, lr=train_cfg.lr)
                iteration += 1
                line = {"iter": iteration, "L_e": report.l_e, "L_i": report.l_i,
                        "L_f": report.l_f, "L_Norm": report.l_norm,
                        "L_TV": report.l_tv, "L_dssim": report.l_dssim,
                        "total": report.total}
                log.write(json.dumps(line, sort_keys=True) + "\n")
                if iteration >= total_iters():
                    stop = True
                    break
            write_ckpt(epoch)
            if stop:
                break

    return {
        "iterations": iteration,
        "checkpoint": str(ckpt_path),
        "loss_log": str(log_path),
        "architecture_report": str(out_dir / "architecture.json"),
        "elapsed_seconds": time.monotonic() - started,
    }
