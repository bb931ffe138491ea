import json

import numpy as np
import pytest

import iidlab.autodiff as ad
from iidlab.autodiff import Tensor
from iidlab.errors import CheckpointMismatch, InvalidConfig, ManifestEmpty
from iidlab.imagecore import ImageRGB, SegClass, SegmentMap
from iidlab.losses import LossWeights
from iidlab.priors import compute_bundle
from iidlab.signet import (
    ModelConfig,
    TrainConfig,
    attention,
    build,
    config_hash,
    make_inputs,
    net_from_checkpoint,
    predict,
    save_net,
    stack_inputs,
    train_loop,
)
from iidlab.synthgen import SynthConfig, generate_dataset, sample_scene

TINY = ModelConfig(base_width=4, input_size=32, seed=3)


def _tiny_batch(mcfg=TINY, n=1, seed=17):
    scfg = SynthConfig(size=mcfg.input_size, seed=seed)
    per_sample = []
    for i in range(n):
        s = sample_scene(scfg, i)
        bundle = None if mcfg.no_priors else compute_bundle(s.image, s.segments)
        per_sample.append(make_inputs(s.image, s.segments, bundle, mcfg))
    return stack_inputs(per_sample)


class TestBuild:
    def test_same_seed_bit_identical(self):
        a = build(TINY)
        b = build(TINY)
        assert list(a.params) == list(b.params)
        for name in a.params:
            assert np.array_equal(a.params[name].values, b.params[name].values), name

    def test_different_seed_differs(self):
        a = build(TINY)
        b = build(ModelConfig(base_width=4, input_size=32, seed=4))
        assert any(not np.array_equal(a.params[n].values, b.params[n].values)
                   for n in a.params)

    def test_bottleneck_spatial_size(self):
        net = build(ModelConfig(base_width=8, input_size=64, seed=0))
        x = Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
        skips, bottleneck = net.encoders["image"](x, "eval")
        assert bottleneck.values.shape == (1, 64, 4, 4)  # four stride-2 halvings
        assert [s.values.shape[2] for s in skips] == [64, 32, 16, 8]

    def test_doubling_width_roughly_quadruples_params(self):
        n8 = build(ModelConfig(base_width=8, input_size=64, seed=0)).parameter_count()
        n16 = build(ModelConfig(base_width=16, input_size=64, seed=0)).parameter_count()
        assert 3.2 <= n16 / n8 <= 4.0  # conv-dominated scaling

    def test_conflicting_flags_rejected(self):
        with pytest.raises(InvalidConfig):
            ModelConfig(no_edge_module=True, image_edges=True)

    def test_invalid_width_rejected(self):
        with pytest.raises(InvalidConfig):
            ModelConfig(base_width=7)


class TestMakeInputs:
    def test_one_hot_channels(self):
        scfg = SynthConfig(size=32, seed=1, n_regions=3)
        s = sample_scene(scfg, 0)
        k = s.segments.n_segments
        bundle = compute_bundle(s.image, s.segments)
        inputs = make_inputs(s.image, s.segments, bundle, TINY)
        semantic = inputs["semantic"]
        assert semantic.shape == (18, 32, 32)
        hot = semantic[:16].sum(axis=0)
        assert np.all(hot == 1.0)
        assert np.all(semantic[k:16] == 0.0)

    def test_overflow_labels_fold_into_last_channel(self):
        labels = np.arange(25, dtype=np.int32).reshape(5, 5)
        labels = np.kron(labels, np.ones((7, 7), dtype=np.int32))[:32, :32]
        # relabel to contiguous ids (0..24 all present in the 35x35 kron grid,
        # the crop keeps at least 17)
        uniq = np.unique(labels)
        remap = {int(v): i for i, v in enumerate(uniq)}
        labels = np.vectorize(remap.get)(labels).astype(np.int32)
        seg = SegmentMap(labels=labels,
                         classes={i: SegClass.OTHER for i in range(len(uniq))})
        img = ImageRGB(np.random.default_rng(0).random((32, 32, 3)).astype(np.float32))
        bundle = compute_bundle(img, seg)
        semantic = make_inputs(img, seg, bundle, TINY)["semantic"]
        overflow = labels >= 15
        assert overflow.any()
        assert np.all(semantic[15][overflow] == 1.0)

    def test_wall_mask_matches_class(self):
        scfg = SynthConfig(size=32, seed=2, wall_ceiling_prob=1.0)
        s = sample_scene(scfg, 0)
        bundle = compute_bundle(s.image, s.segments)
        semantic = make_inputs(s.image, s.segments, bundle, TINY)["semantic"]
        wall = s.segments.class_mask(SegClass.WALL)
        ceiling = s.segments.class_mask(SegClass.CEILING)
        assert np.array_equal(semantic[16] == 1.0, wall)
        assert np.array_equal(semantic[17] == 1.0, ceiling)

    def test_constant_image_ccr_channels_zero(self):
        img = ImageRGB(np.full((32, 32, 3), 0.5, dtype=np.float32))
        seg = SegmentMap(labels=np.zeros((32, 32), dtype=np.int32),
                         classes={0: SegClass.OTHER})
        bundle = compute_bundle(img, seg)
        ccr = make_inputs(img, seg, bundle, TINY)["ccr"]
        assert ccr.shape == (7, 32, 32)
        assert np.abs(ccr).max() <= 1e-6  # log(1) ratios and zero strength


class TestAttention:
    def test_saturated_gate_passes_input(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.random((1, 2, 4, 4)).astype(np.float32))
        gate = Tensor(np.full((1, 2, 4, 4), 30.0, dtype=np.float32))
        out = attention(gate, x)
        assert np.abs(out.values - x.values).max() <= 1e-9

    def test_zero_gate_halves_input(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.random((1, 2, 4, 4)))
        out = attention(Tensor(np.zeros((1, 2, 4, 4))), x)
        assert np.allclose(out.values, 0.5 * x.values)


class TestForward:
    def test_output_shapes_input_64(self):
        cfg = ModelConfig(base_width=4, input_size=64, seed=5)
        net = build(cfg)
        inputs = _tiny_batch(cfg, n=2)
        out = net.forward(inputs, mode="eval")
        assert out.r_final.values.shape == (2, 3, 64, 64)
        assert out.s_final.values.shape == (2, 1, 64, 64)
        assert out.edge_half.values.shape == (2, 1, 32, 32)
        assert out.edge_quarter.values.shape == (2, 1, 16, 16)
        assert out.r_initial.values.shape == (2, 3, 64, 64)

    def test_shapes_independent_of_width(self):
        for bw in (4, 8):
            cfg = ModelConfig(base_width=bw, input_size=32, seed=5)
            out = build(cfg).forward(_tiny_batch(cfg), mode="eval")
            assert out.r_final.values.shape == (1, 3, 32, 32)
            assert out.s_final.values.shape == (1, 1, 32, 32)

    def test_eval_forward_deterministic(self):
        net = build(TINY)
        inputs = _tiny_batch()
        a = net.forward(inputs, mode="eval")
        b = net.forward(inputs, mode="eval")
        assert np.array_equal(a.r_final.values, b.r_final.values)
        assert np.array_equal(a.s_final.values, b.s_final.values)

    def test_output_range_contracts(self):
        net = build(TINY)
        rng = np.random.default_rng(6)
        inputs = {k: rng.random(v.shape).astype(np.float32)
                  for k, v in _tiny_batch().items()}
        out = net.forward(inputs, mode="eval")
        assert out.r_final.values.min() >= 0.0 and out.r_final.values.max() <= 1.0
        assert out.s_final.values.min() >= 0.0
        for edge in (out.edge_full, out.edge_half, out.edge_quarter):
            assert edge.values.min() >= 0.0 and edge.values.max() <= 1.0

    def test_zero_head_parameters_fix_outputs(self):
        net = build(TINY)
        for name in ("final_r.head.w", "final_r.head.b", "final_s.head.w", "final_s.head.b"):
            net.params[name].values = np.zeros_like(net.params[name].values)
        out = net.forward(_tiny_batch(), mode="eval")
        assert np.all(out.r_final.values == 0.5)  # sigmoid(0)
        assert np.all(out.s_final.values == 0.0)  # relu(0)

    def test_backprop_reaches_every_parameter(self):
        for flags in ({}, {"no_priors": True}, {"no_edge_module": True},
                      {"image_edges": True}):
            cfg = ModelConfig(base_width=4, input_size=32, seed=7, **flags)
            net = build(cfg)
            inputs = _tiny_batch(cfg, n=2, seed=23)
            out = net.forward(inputs, mode="train")
            loss = ad.add(ad.sum_all(out.r_final), ad.sum_all(out.s_final))
            if out.edge_full is not None and cfg.no_edge_module is False and not cfg.image_edges:
                loss = ad.add(loss, ad.sum_all(out.edge_quarter))
            loss.backward()
            ad.adam_step(net.params)
            zero_blocks = [n for n, p in net.params.items() if not np.any(p.v)]
            assert not zero_blocks, (flags, zero_blocks)


class TestAblations:
    def test_no_priors_single_encoder(self):
        cfg = ModelConfig(base_width=4, input_size=32, seed=8, no_priors=True)
        net = build(cfg)
        report = net.architecture_report()
        global_encoders = [e for e in report["encoders"] if not e.startswith("final")]
        assert global_encoders == ["image"]
        out = net.forward(_tiny_batch(cfg), mode="eval")
        assert out.r_final.values.shape == (1, 3, 32, 32)

    def test_image_edges_uses_input_canny(self):
        cfg = ModelConfig(base_width=4, input_size=32, seed=9, image_edges=True)
        net = build(cfg)
        inputs = _tiny_batch(cfg)
        assert "edge" in inputs
        out = net.forward(inputs, mode="eval")
        assert np.array_equal(out.edge_full.values, inputs["edge"])

    def test_no_edge_module_omits_edges(self):
        cfg = ModelConfig(base_width=4, input_size=32, seed=10, no_edge_module=True)
        net = build(cfg)
        out = net.forward(_tiny_batch(cfg), mode="eval")
        assert out.edge_full is None and out.edge_half is None
        assert out.r_final.values.shape == (1, 3, 32, 32)  # head shapes unchanged
        assert out.s_final.values.shape == (1, 1, 32, 32)

    def test_flags_change_hash(self):
        base = config_hash(TINY)
        for flags in ({"no_priors": True}, {"no_edge_module": True}, {"image_edges": True}):
            cfg = ModelConfig(base_width=4, input_size=32, seed=3, **flags)
            assert config_hash(cfg) != base


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("train_ds")
    generate_dataset(SynthConfig(size=32, seed=31), 5, out)  # 4 train / 1 test
    return out


class TestTrainLoop:
    def test_zero_lr_keeps_loss_constant(self, tiny_dataset, tmp_path):
        net = build(TINY)
        cfg = TrainConfig(epochs=6, lr=0.0, batch=4)
        train_loop(net, tiny_dataset, cfg, tmp_path / "run")
        lines = [json.loads(l) for l in
                 (tmp_path / "run" / "loss_log.jsonl").read_text().splitlines()]
        totals = [l["total"] for l in lines]
        assert len(totals) == 6
        assert max(totals) - min(totals) <= 1e-3

    def test_training_is_deterministic(self, tiny_dataset, tmp_path):
        logs = []
        for run in ("a", "b"):
            net = build(TINY)
            train_loop(net, tiny_dataset, TrainConfig(epochs=3, lr=2e-4, batch=2),
                       tmp_path / run)
            logs.append((tmp_path / run / "loss_log.jsonl").read_bytes())
        assert logs[0] == logs[1]

    def test_resume_matches_uninterrupted_run(self, tiny_dataset, tmp_path):
        straight = build(TINY)
        train_loop(straight, tiny_dataset, TrainConfig(epochs=4, lr=2e-4, batch=2),
                   tmp_path / "full")

        part = build(TINY)
        train_loop(part, tiny_dataset, TrainConfig(epochs=2, lr=2e-4, batch=2),
                   tmp_path / "part")
        resumed = build(TINY)
        train_loop(resumed, tiny_dataset, TrainConfig(epochs=4, lr=2e-4, batch=2),
                   tmp_path / "resumed", resume_from=tmp_path / "part" / "checkpoint.ckpt")

        for name in straight.params:
            assert np.array_equal(straight.params[name].values,
                                  resumed.params[name].values), name
        full_log = (tmp_path / "full" / "loss_log.jsonl").read_text().splitlines()
        res_log = (tmp_path / "resumed" / "loss_log.jsonl").read_text().splitlines()
        assert full_log[4:] == res_log  # resumed log covers iterations 5..8

    def test_max_iters_cap(self, tiny_dataset, tmp_path):
        net = build(TINY)
        summary = train_loop(net, tiny_dataset,
                             TrainConfig(epochs=10, lr=2e-4, batch=2, max_iters=3),
                             tmp_path / "capped")
        assert summary["iterations"] == 3

    def test_empty_manifest_errors(self, tmp_path):
        generate_dataset(SynthConfig(size=32, seed=32), 0, tmp_path / "empty")
        with pytest.raises(ManifestEmpty):
            train_loop(build(TINY), tmp_path / "empty", TrainConfig(epochs=1), tmp_path / "out")


class TestCheckpointRoundtrip:
    def test_net_roundtrip(self, tmp_path):
        net = build(TINY)
        rng = np.random.default_rng(12)
        for p in net.params.values():
            p.values = rng.standard_normal(p.values.shape).astype(np.float32)
        save_net(net, tmp_path / "net.ckpt", extra_meta={"iter": 0})
        back, meta = net_from_checkpoint(tmp_path / "net.ckpt")
        assert meta["iter"] == 0
        for name in net.params:
            assert np.array_equal(net.params[name].values, back.params[name].values)

    def test_hash_mismatch_detected(self, tmp_path):
        net = build(TINY)
        save_net(net, tmp_path / "net.ckpt")
        raw = (tmp_path / "net.ckpt").read_bytes()
        header, payload = raw.split(b"\n", 1)
        doc = json.loads(header)
        doc["meta"]["arch_hash"] = "0" * 64
        (tmp_path / "bad.ckpt").write_bytes(json.dumps(doc, sort_keys=True).encode() + b"\n" + payload)
        with pytest.raises(CheckpointMismatch):
            net_from_checkpoint(tmp_path / "bad.ckpt")


def test_predict_single_image():
    cfg = ModelConfig(base_width=4, input_size=32, seed=13)
    net = build(cfg)
    s = sample_scene(SynthConfig(size=32, seed=41), 0)
    out = predict(net, s.image, s.segments)
    assert out.r_final.values.shape == (1, 3, 32, 32)
    assert np.all(np.isfinite(out.r_final.values))
