import json

import numpy as np
import pytest

from longattn import checkpoint as ckpt
from longattn.config import ExperimentConfig
from longattn.errors import CheckpointError, ConfigError
from longattn.lora import TrainabilityPolicy, attach_lora
from longattn.model import AdamW, AttnMode, ModelConfig, forward, train_step

from conftest import randomize


def trained(model, steps=2):
    opt = AdamW()
    r = np.random.default_rng(0)
    for _ in range(steps):
        train_step(model, [r.integers(model.config.vocab_size, size=9)], AttnMode.full(4), opt, 1e-2)
    return opt


class TestRoundTrip:
    def test_save_load_save_identical(self, tiny_model):
        attach_lora(tiny_model, r=2, policy=TrainabilityPolicy(norms=False))
        opt = trained(tiny_model)
        first = ckpt.to_bytes(tiny_model, opt, {"step": 2})
        loaded = ckpt.from_bytes(first)
        assert ckpt.to_bytes(loaded.model, loaded.optimizer, loaded.state) == first

    def test_restores_everything(self, tiny_model):
        attach_lora(tiny_model, targets=["q", "up"], r=3, alpha=6, policy=TrainabilityPolicy(norms=False))
        opt = trained(tiny_model, 3)
        ckpt.round_to_storage(tiny_model, opt)
        back = ckpt.from_bytes(ckpt.to_bytes(tiny_model, opt, {"step": 3, "note": "x"}))
        m = back.model
        assert m.config == tiny_model.config and back.state == {"step": 3, "note": "x"}
        for (na, pa), (nb, pb) in zip(tiny_model.named_parameters(), m.named_parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data) and pa.requires_grad == pb.requires_grad
        assert m.adapters["layers.0.wq"].r == 3 and m.adapters["layers.1.w_up"].alpha == 6
        assert back.optimizer.step_count == 3
        for k in opt.m:
            assert np.array_equal(opt.m[k], back.optimizer.m[k]) and np.array_equal(opt.v[k], back.optimizer.v[k])

    def test_float32_precision_loss_is_bounded(self, tiny_model):
        randomize(tiny_model)
        tokens = np.arange(12) % 32
        before = forward(tiny_model, tokens, AttnMode.full(4)).data
        back = ckpt.from_bytes(ckpt.to_bytes(tiny_model)).model
        for name, p in tiny_model.params.items():
            np.testing.assert_allclose(back.params[name].data, p.data, rtol=2 ** -23, atol=0)
        assert np.abs(forward(back, tokens, AttnMode.full(4)).data - before).max() < 1e-5

    def test_header_layout(self, tiny_model):
        raw = ckpt.to_bytes(tiny_model)
        n = int.from_bytes(raw[:8], "little")
        header = json.loads(raw[8:8 + n])
        assert header["format_version"] == 1 and header["config"] == tiny_model.config.to_dict()
        offsets = [e["offset"] for e in header["manifest"]]
        sizes = [4 * int(np.prod(e["shape"])) for e in header["manifest"]]
        assert offsets == list(np.cumsum([0] + sizes[:-1]))
        assert len(raw) == 8 + n + sum(sizes)
        first = header["manifest"][0]
        payload = np.frombuffer(raw[8 + n:8 + n + sizes[0]], dtype="<f4").reshape(first["shape"])
        assert np.array_equal(payload, tiny_model.params[first["name"]].data.astype(np.float32))

    def test_file_roundtrip(self, tiny_model, tmp_path):
        path = tmp_path / "m.ckpt"
        ckpt.save(path, tiny_model)
        again = tmp_path / "again.ckpt"
        ckpt.save(again, ckpt.load(path).model)
        assert path.read_bytes() == again.read_bytes()


class TestFailures:
    def test_mismatched_config(self, tiny_model, tiny_config):
        raw = ckpt.to_bytes(tiny_model)
        other = ModelConfig(**{**tiny_config.to_dict(), "d_ff": 64})
        with pytest.raises(ConfigError, match="d_ff"):
            ckpt.from_bytes(raw, expected_config=other)

    def test_truncated(self, tiny_model):
        raw = ckpt.to_bytes(tiny_model)
        for cut in (4, 20, len(raw) - 3):
            with pytest.raises(CheckpointError):
                ckpt.from_bytes(raw[:cut])

    def test_not_a_checkpoint(self):
        body = json.dumps({"format": "other"}).encode()
        with pytest.raises(CheckpointError):
            ckpt.from_bytes(len(body).to_bytes(8, "little") + body)
        with pytest.raises(CheckpointError):
            ckpt.from_bytes(b"\x05\x00\x00\x00\x00\x00\x00\x00{oops")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            ckpt.load(tmp_path / "nope.ckpt")

    def test_manifest_shape_mismatch(self, tiny_model):
        raw = ckpt.to_bytes(tiny_model)
        n = int.from_bytes(raw[:8], "little")
        header = json.loads(raw[8:8 + n])
        header["config"]["vocab_size"] = 16
        body = json.dumps(header).encode()
        with pytest.raises(ConfigError):
            ckpt.from_bytes(len(body).to_bytes(8, "little") + body + raw[8 + n:])


class TestExperimentConfig:
    def test_defaults_roundtrip(self):
        cfg = ExperimentConfig.from_dict({})
        assert ExperimentConfig.from_dict(json.loads(cfg.to_json())) == cfg

    def test_partial_document(self):
        cfg = ExperimentConfig.from_dict({"model": {"vocab_size": 64}, "train": {"steps": 5},
                                          "attention": {"kind": "sink_fixed", "group_size": 32}})
        assert cfg.model.vocab_size == 64 and cfg.model.d_model == 128
        assert cfg.train.steps == 5 and cfg.train.lr == 3e-4
        assert cfg.attention.build(8).heads.pattern_per_half[0].num_sink == 4
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("doc", [
        {"bogus": 1},
        {"model": {"n_heads": 3}},
        {"model": {"depth": 2}},
        {"attention": {"kind": "sliding"}},
        {"train": {"task": "text"}},
        {"train": {"steps": "many"}},
        {"cache": {"policies": ["lru"]}},
        {"cache": {"budget_pcts": [0]}},
        {"eval": {"retriever": "human"}},
        {"train": []},
    ])
    def test_rejects(self, doc):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(doc)

    def test_attention_kinds_build(self):
        for kind in ("roll", "shifted_heads", "full_causal", "group", "sink_fixed", "stride", "random"):
            mode = ExperimentConfig.from_dict({"attention": {"kind": kind}}).attention.build(8)
            assert mode.kind in ("roll", "mask")

    def test_cache_policies(self):
        c = ExperimentConfig.from_dict({}).cache
        assert c.policy("h2o", 10).recent == 5
        assert c.policy("sink", 3).num_sink == 2
        assert c.policy("local", 1).budget == 2
        assert c.policy("full", 0).capacity() is None
