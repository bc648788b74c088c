import numpy as np
import pytest
import torch

from conftest import small_spec
from pmcgan import cascade as cs
from pmcgan import losses as L
from pmcgan.dataset import build_stage_dataset, get_stage
from pmcgan.errors import InvalidStage, MissingCheckpoint, NonFiniteLoss, ShapeMismatch

TINY = cs.ModelSpec(small_spec(), d_width=8, d_layers=2, e_width=8, e_blocks=2)
NO_VGG = L.LossWeights(use_vgg=False)


def toy_samples(stage=1, n=2, seed=0):
    from pmcgan.synthetic import random_scene

    rng = np.random.default_rng(seed)
    res = get_stage(stage).resolution
    scenes = [random_scene(rng, 2 * res + 64, 3 * res, n_pedestrians=2,
                           h_range=(get_stage(stage).h_min, min(get_stage(stage).h_max, 2 * res)), scene_id=f"s{k}")
              for k in range(n)]
    return build_stage_dataset(scenes, get_stage(stage), rng)[:n]


def tiny_batch(stage, size=16, batch=1, seed=0):
    from conftest import random_condition

    cond = random_condition(size, batch, seed)
    B = torch.rand(batch, 3, size, size, generator=torch.Generator().manual_seed(seed + 1)) * 2 - 1
    return cs.Batch(cs.condition_pyramid(cond, stage), cs.image_pyramid(B, stage))


def stage_states(stage, schedule=None, seed=0):
    schedule = schedule or cs.TrainSchedule(epochs_per_stage=200)
    prev = None
    for s in range(1, stage + 1):
        state = cs.new_stage_state(s, TINY, schedule, seed, prev)
        prev = state.cascade
    return state


class TestSchedule:
    def test_learning_rate_examples(self):
        assert cs.stage_learning_rate(3, 3) == pytest.approx(2e-4, rel=1e-12)
        assert cs.stage_learning_rate(2, 3) == pytest.approx(2e-6, rel=1e-12)
        assert cs.stage_learning_rate(1, 3) == pytest.approx(2e-8, rel=1e-12)

    def test_learning_rate_range(self):
        for i in (0, 4):
            with pytest.raises(InvalidStage):
                cs.stage_learning_rate(i, 3)

    def test_trainable_sets_total(self):
        def expected(stage, epoch):
            if stage == 1:
                return {"G1", "E1", "D1"}
            if epoch <= 100:
                return {f"G{stage}", f"E{stage}", f"D{stage}"}
            return {f"G{stage - 1}", f"G{stage}", f"E{stage - 1}", f"E{stage}", f"D{stage}"}

        declared = {f"{k}{i}" for k in "GED" for i in (1, 2, 3)}
        for stage in (1, 2, 3):
            for epoch in range(1, 201):
                got = cs.trainable_sets(stage, epoch)
                assert got == expected(stage, epoch)
                assert got <= declared

    def test_trainable_examples(self):
        assert cs.trainable_sets(2, 50) == {"G2", "E2", "D2"}
        assert cs.trainable_sets(3, 150) == {"G2", "G3", "E2", "E3", "D3"}

    @pytest.mark.parametrize("stage,epoch", [(0, 1), (4, 1), (1, 0), (2, 201)])
    def test_trainable_invalid(self, stage, epoch):
        with pytest.raises(InvalidStage):
            cs.trainable_sets(stage, epoch)

    def test_decay(self):
        sched = cs.TrainSchedule()
        assert cs.lr_decay_factor(1, sched) == 1.0
        assert cs.lr_decay_factor(100, sched) == 1.0
        f = [cs.lr_decay_factor(e, sched) for e in range(100, 201)]
        assert all(a > b for a, b in zip(f, f[1:]))
        assert 0 < f[-1] < 0.02


class TestIntegration:
    def test_passthrough(self):
        cond = torch.randn(1, 40, 64, 64)
        assert cs.integrate_stages(None, cond) is cond

    def test_nearest_upsample_oracle(self):
        prev = torch.randn(1, 3, 64, 64)
        out = cs.integrate_stages(prev, torch.randn(1, 40, 128, 128))
        assert out.shape == (1, 43, 128, 128)
        p, o = prev.numpy(), out.numpy()
        for y in range(128):
            for x in range(128):
                assert np.array_equal(o[0, 40:43, y, x], p[0, :, y // 2, x // 2])

    def test_bad_resolution(self):
        with pytest.raises(ShapeMismatch):
            cs.integrate_stages(torch.randn(1, 3, 32, 32), torch.randn(1, 40, 128, 128))

    def test_downsample_keeps_mask_fill(self):
        from conftest import random_condition

        small = cs.downsample_condition(random_condition(16))
        m = small[:, 38:39]
        assert small.shape == (1, 40, 8, 8)
        assert torch.all(small[:, 0:3] * m == 0)
        assert torch.all(small[:, 3:38].sum(1) == 1)


class TestCascade:
    def test_missing_stage(self):
        state = stage_states(1)
        with pytest.raises(MissingCheckpoint):
            state.cascade(torch.randn(1, 40, 16, 16), torch.randn(1, 16), stage=2)

    def test_new_stage_needs_predecessor(self):
        with pytest.raises(MissingCheckpoint):
            cs.new_stage_state(2, TINY)

    def test_new_stage_leaves_global_rng(self):
        torch.manual_seed(5)
        a = torch.rand(3)
        torch.manual_seed(5)
        cs.new_stage_state(1, TINY)
        assert torch.equal(torch.rand(3), a)

    def test_lr_groups_stage2(self):
        state = stage_states(2)
        rates = {g["name"]: g["lr"] for g in state.opt_g.param_groups}
        assert rates["G2"] == pytest.approx(2e-4, rel=1e-12)
        assert rates["G1"] == pytest.approx(2e-6, rel=1e-12)
        assert rates["G1"] / rates["G2"] == pytest.approx(0.01, rel=1e-12)
        assert state.opt_d.param_groups[0]["lr"] == pytest.approx(2e-4, rel=1e-12)

    def test_lr_groups_stage3(self):
        state = stage_states(3)
        for group in state.opt_g.param_groups:
            j = int(group["name"][1:])
            assert group["lr"] == cs.stage_learning_rate(j, 3)


def checksums(state):
    return {n: cs.parameter_checksum(state.module(n)) for n in state.module_names()}


class TestTrainStep:
    def test_report_finite(self):
        state = stage_states(1)
        report = cs.train_step(tiny_batch(1), state, NO_VGG, epoch=1)
        for v in report.terms().values():
            assert np.isfinite(v)
        assert report.vgg == 0.0

    @pytest.mark.parametrize("epoch,frozen", [(50, {"G1", "E1"}), (150, set())])
    def test_freeze_invariance_stage2(self, epoch, frozen):
        state = stage_states(2)
        before = checksums(state)
        cs.train_step(tiny_batch(2), state, NO_VGG, epoch=epoch)
        after = checksums(state)
        assert {n for n in before if before[n] == after[n]} == frozen

    def test_freeze_invariance_stage3(self):
        state = stage_states(3)
        before = checksums(state)
        cs.train_step(tiny_batch(3, size=32), state, NO_VGG, epoch=150)
        after = checksums(state)
        assert {n for n in before if before[n] == after[n]} == {"G1", "E1"}

    def test_deterministic(self):
        reports = []
        for _ in range(2):
            state = stage_states(1, seed=3)
            reports.append([cs.train_step(tiny_batch(1), state, NO_VGG, epoch=1).as_dict() for _ in range(2)])
        assert reports[0] == reports[1]

    def test_nan_raises(self):
        state = stage_states(1)
        with torch.no_grad():
            next(state.cascade.G[0].parameters()).fill_(float("nan"))
        d_before = cs.parameter_checksum(state.d_img)
        with pytest.raises(NonFiniteLoss):
            cs.train_step(tiny_batch(1), state, NO_VGG, epoch=1)
        assert cs.parameter_checksum(state.d_img) == d_before

    def test_vgg_excluded_at_stage1(self):
        probe = L.PerceptualLoss(L.ToyFeatures())
        state = stage_states(1)
        weights = L.LossWeights(use_vgg=True).for_stage(1)
        cs.train_step(tiny_batch(1), state, weights, epoch=1, perceptual=probe)
        assert probe.calls == 0

    def test_vgg_used_at_stage2(self):
        probe = L.PerceptualLoss(L.ToyFeatures())
        state = stage_states(2)
        report = cs.train_step(tiny_batch(2), state, L.LossWeights().for_stage(2), epoch=1, perceptual=probe)
        assert probe.calls == 1 and report.vgg > 0

    def test_total_matches_weighted_terms(self):
        state = stage_states(1)
        report = cs.train_step(tiny_batch(1), state, NO_VGG, epoch=1)
        assert report.total == pytest.approx(L.weighted_total(report.terms(), NO_VGG), abs=1e-12)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        state = stage_states(2)
        cs.train_step(tiny_batch(2), state, NO_VGG, epoch=120)
        path = cs.save_checkpoint(state, tmp_path / "ck.pt")
        loaded = cs.load_checkpoint(path)
        cond = tiny_batch(2).cond
        z = torch.randn(1, 16, generator=torch.Generator().manual_seed(9))
        state.cascade.eval()
        loaded.cascade.eval()
        with torch.no_grad():
            assert torch.equal(state.cascade(cond, z), loaded.cascade(cond, z))
        assert checksums(state) == checksums(loaded)
        assert torch.equal(state.rng.get_state(), loaded.rng.get_state())

    def test_resumed_step_matches(self, tmp_path):
        state = stage_states(1)
        cs.train_step(tiny_batch(1), state, NO_VGG, epoch=1)
        cs.save_checkpoint(state, tmp_path / "ck.pt")
        loaded = cs.load_checkpoint(tmp_path / "ck.pt")
        a = cs.train_step(tiny_batch(1, seed=4), state, NO_VGG, epoch=2)
        b = cs.train_step(tiny_batch(1, seed=4), loaded, NO_VGG, epoch=2)
        assert a.as_dict() == b.as_dict()

    def test_missing(self, tmp_path):
        with pytest.raises(MissingCheckpoint):
            cs.load_checkpoint(tmp_path / "nope.pt")


class TestTrainStage:
    def test_stage2_without_predecessor(self, tmp_path):
        with pytest.raises(MissingCheckpoint):
            cs.train_stage(2, toy_samples(2, n=1), tmp_path, cs.TrainSchedule(epochs_per_stage=2), NO_VGG, TINY)

    def test_checkpoints_and_log(self, tmp_path):
        sched = cs.TrainSchedule(epochs_per_stage=4, checkpoint_every=3)
        samples = toy_samples(1, n=2)
        state = cs.train_stage(1, samples, tmp_path, sched, NO_VGG, TINY)
        names = sorted(p.name for p in (tmp_path / "stage1").glob("*.pt"))
        assert names == ["epoch002.pt", "epoch003.pt", "epoch004.pt", "latest.pt"]
        rows = cs.read_loss_log(tmp_path / "stage1" / "losses.jsonl")
        assert len(rows) == 8 and rows[-1]["epoch"] == 4
        assert state.epoch == 4

        state2 = cs.train_stage(2, toy_samples(2, n=1), tmp_path, sched, NO_VGG, TINY)
        assert state2.cascade.depth == 2
        assert (tmp_path / "stage2" / "latest.pt").is_file()

    def test_resume_continues(self, tmp_path):
        sched = cs.TrainSchedule(epochs_per_stage=4, checkpoint_every=2)
        samples = toy_samples(1, n=1)
        full = cs.train_stage(1, samples, tmp_path / "a", sched, NO_VGG, TINY, seed=1)
        interrupted(lambda hook: cs.train_stage(1, samples, tmp_path / "b", sched, NO_VGG, TINY, seed=1, on_step=hook), 2)
        resumed = cs.train_stage(1, samples, tmp_path / "b", sched, NO_VGG, TINY, seed=1)
        assert checksums(full) == checksums(resumed)

    def test_nan_preserves_checkpoint(self, tmp_path):
        sched = cs.TrainSchedule(epochs_per_stage=4, checkpoint_every=2)
        samples = toy_samples(1, n=1)
        interrupted(lambda hook: cs.train_stage(1, samples, tmp_path, sched, NO_VGG, TINY, on_step=hook), 2)
        latest = tmp_path / "stage1" / "latest.pt"
        state = cs.load_checkpoint(latest)
        with torch.no_grad():
            next(state.cascade.G[0].parameters()).fill_(float("nan"))
        cs.save_checkpoint(state, latest)
        blob = latest.read_bytes()
        with pytest.raises(NonFiniteLoss):
            cs.train_stage(1, samples, tmp_path, sched, NO_VGG, TINY)
        assert latest.read_bytes() == blob


class _Stop(Exception):
    pass


def interrupted(run, last_epoch):
    """Run ``run(hook)`` and abort it as soon as an epoch after ``last_epoch`` starts."""

    def hook(epoch, report):
        if epoch > last_epoch:
            raise _Stop

    with pytest.raises(_Stop):
        run(hook)
