import csv

import numpy as np
import pytest

from m3ae.config import TrainConfig
from m3ae.errors import CheckpointConfigError, CheckpointIntegrityError
from m3ae.harness import (
    LOG_FIELDS,
    Batch,
    Sample,
    build_param_groups,
    group_of,
    load_checkpoint,
    make_optimizer,
    prepare_text,
    pretrain_step,
    restore_optimizer,
    save_checkpoint,
    train,
)
from m3ae.model import M3AE
from m3ae.tensor import no_grad
from m3ae.transformer import ModelConfig

from conftest import scene_dataset


@pytest.fixture(scope="module")
def tiny():
    return scene_dataset(8)


def _cfg(**kw):
    base = dict(total_steps=20, batch_size=4, lr_unimodal=1e-3, lr_fusion=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def _snapshot(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


class TestBatching:
    def test_mixed_lengths_rejected(self):
        a = Sample(np.zeros((4, 16)), np.array([2, 5, 3]), "x")
        b = Sample(np.zeros((4, 16)), np.array([2, 5, 6, 3]), "x y")
        with pytest.raises(ValueError):
            Batch.from_samples([a, b])
        with pytest.raises(ValueError):
            Batch.from_samples([])

    def test_sample_batch_deterministic(self, tiny):
        _, _, ds = tiny
        a, b = ds.sample_batch(4, 0, 3), ds.sample_batch(4, 0, 3)
        assert a.captions == b.captions
        assert ds.sample_batch(4, 0, 4).captions != a.captions or len(ds) <= 4

    def test_prepare_text_truncates_keeping_separator(self, tiny):
        vocab, cfg, _ = tiny
        ids = prepare_text("a dark small cross in the upper left", vocab, cfg)
        assert len(ids) == cfg.max_text_len + 2
        assert ids[0] == vocab.start_id and ids[-1] == vocab.sep_id


class TestParamGroups:
    def test_prefixes(self):
        assert group_of("embeddings.token") == "unimodal"
        assert group_of("vision_encoder.layers.0.attn.q.weight") == "unimodal"
        assert group_of("text_encoder.layers.0.ff.fc1.bias") == "unimodal"
        assert group_of("fusion.layers.0.vision.cross_attn.q.weight") == "fusion"
        assert group_of("itm_head.fc1.weight") == "fusion"
        with pytest.raises(ValueError):
            group_of("mystery.weight")

    def test_partition_with_default_rates(self):
        model = M3AE(ModelConfig.tiny(), seed=0)
        groups = build_param_groups(model, TrainConfig())
        names = [n for g in groups for n in g.params]
        assert sorted(names) == sorted(n for n, _ in model.named_parameters())
        assert len(names) == len(set(names))
        rates = {g.name: g.schedule.peak_lr for g in groups}
        assert rates == {"unimodal": 1e-5, "fusion": 5e-5}


class TestPretrainStep:
    def test_updates_parameters(self, tiny):
        _, cfg, ds = tiny
        model = M3AE(cfg, seed=0)
        tc = _cfg()
        before = _snapshot(model)
        rep = pretrain_step(ds.sample_batch(4, 0, 1), model, make_optimizer(model, tc), 1, tc)
        assert np.isfinite(rep.total) and rep.total > 0
        assert rep.total == pytest.approx(rep.mim + rep.mlm + rep.itm, rel=1e-5)
        after = _snapshot(model)
        assert any(not np.array_equal(before[n], after[n]) for n in before)

    def test_all_zero_weights_skip_step(self, tiny):
        _, cfg, ds = tiny
        model = M3AE(cfg, seed=0)
        tc = _cfg(task_weights={"mim": 0.0, "mlm": 0.0, "itm": 0.0})
        opt = make_optimizer(model, tc)
        before = _snapshot(model)
        rep = pretrain_step(ds.sample_batch(4, 0, 1), model, opt, 1, tc)
        assert rep.total == 0.0
        assert opt.state.step_count == 0
        after = _snapshot(model)
        assert all(np.array_equal(before[n], after[n]) for n in before)

    def test_zero_weight_task_not_run(self, tiny):
        _, cfg, ds = tiny
        model = M3AE(cfg, seed=0)
        tc = _cfg(task_weights={"mim": 1.0, "mlm": 0.0, "itm": 1.0})
        rec = []
        rep = pretrain_step(ds.sample_batch(4, 0, 0), model, None, 0, tc, recorder=rec)
        assert [r.name for r in rec] == ["mim", "itm"]
        assert rep.mlm == 0.0 and rep.counts["mlm"] == 0

    def test_step_past_end(self, tiny):
        _, cfg, ds = tiny
        with pytest.raises(ValueError):
            pretrain_step(ds.sample_batch(4, 0, 0), M3AE(cfg), None, 20, _cfg())

    def test_forward_inputs_are_separated(self, tiny):
        _, cfg, ds = tiny
        model = M3AE(cfg, seed=0)
        tc = _cfg()
        batch = ds.sample_batch(4, 0, 2)
        rec = []
        pretrain_step(batch, model, None, 2, tc, recorder=rec)
        by = {r.name: r for r in rec}
        assert np.array_equal(by["mim"].ids, batch.ids)
        assert by["mim"].image_masked.sum() == 4 * 3  # ceil(0.75 * 4) per sample
        assert not by["mlm"].image_masked.any()
        assert np.array_equal(by["mlm"].patches, batch.patches)
        assert not np.array_equal(by["mlm"].ids, batch.ids)


class TestTrain:
    def test_log_file(self, tiny, tmp_path):
        _, cfg, ds = tiny
        reps = train(M3AE(cfg, seed=0), ds, _cfg(), steps=5, log_path=tmp_path / "m.csv")
        rows = list(csv.reader(open(tmp_path / "m.csv")))
        assert tuple(rows[0]) == LOG_FIELDS
        assert [int(r[0]) for r in rows[1:]] == list(range(5))
        assert float(rows[1][1]) == 0.0  # warmup starts at zero
        assert float(rows[-1][-1]) == pytest.approx(reps[-1].total, rel=1e-6)

    def test_loss_decreases(self, tiny):
        _, cfg, ds = tiny
        tc = _cfg(total_steps=60, warmup_ratio=0.05, lr_unimodal=3e-3, lr_fusion=3e-3)
        reps = train(M3AE(cfg, seed=0), ds, tc)
        assert np.mean([r.total for r in reps[-10:]]) < np.mean([r.total for r in reps[:5]])

    def test_resume_matches_uninterrupted(self, tiny, tmp_path):
        _, cfg, ds = tiny
        tc = _cfg(total_steps=6)
        straight = M3AE(cfg, seed=0)
        train(straight, ds, tc)

        first = M3AE(cfg, seed=0)
        train(first, ds, tc, steps=3, checkpoint_path=tmp_path / "c.ckpt")
        ck = load_checkpoint(tmp_path / "c.ckpt", cfg)
        assert ck.step == 3
        opt = make_optimizer(ck.model, tc)
        restore_optimizer(opt, ck.optimizer_state)
        train(ck.model, ds, tc, optimizer=opt, start_step=3)
        a, b = _snapshot(straight), _snapshot(ck.model)
        assert all(np.array_equal(a[n], b[n]) for n in a)


class TestCheckpoint:
    @pytest.fixture
    def saved(self, tiny, tmp_path):
        vocab, cfg, ds = tiny
        model = M3AE(cfg, seed=3)
        opt = make_optimizer(model, _cfg())
        train(model, ds, _cfg(), steps=2, optimizer=opt)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, opt, path, step=2, vocab=vocab)
        return model, path, ds.sample_batch(4, 0, 0), vocab

    def test_round_trip_forward_is_bitwise(self, saved):
        model, path, batch, vocab = saved
        ck = load_checkpoint(path)
        with no_grad():
            a = model.forward_itm(batch.patches, batch.ids).data
            b = ck.model.forward_itm(batch.patches, batch.ids).data
        assert np.array_equal(a, b)
        assert ck.vocab == vocab
        assert ck.optimizer_state.step_count == 2

    def test_no_temp_files_left(self, saved):
        _, path, _, _ = saved
        assert [p.name for p in path.parent.iterdir()] == ["m.ckpt"]

    @pytest.mark.parametrize("where", [0, 9, 20, 60, -1, -40, -5000])
    def test_flipped_byte(self, saved, where):
        _, path, _, _ = saved
        blob = bytearray(path.read_bytes())
        blob[where] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    @pytest.mark.parametrize("keep", [0, 10, 100, -1])
    def test_truncated(self, saved, keep):
        _, path, _, _ = saved
        blob = path.read_bytes()
        path.write_bytes(blob[:keep])
        with pytest.raises(CheckpointIntegrityError):
            load_checkpoint(path)

    def test_config_mismatch_names_parameter(self, saved):
        _, path, _, _ = saved
        ck = load_checkpoint(path)
        other = ModelConfig.from_dict({**ck.model.config.to_dict(), "dim": 8})
        with pytest.raises(CheckpointConfigError, match="first mismatch"):
            load_checkpoint(path, other)
        same_shapes = ModelConfig.from_dict({**ck.model.config.to_dict(), "rho_text": 0.3})
        with pytest.raises(CheckpointConfigError, match="hash"):
            load_checkpoint(path, same_shapes)
