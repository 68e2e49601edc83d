"""Inversion tests: chunking, invariance term, contrastive and deep-inversion losses, bank."""
import math

import numpy as np
import pytest

from meldistill.audio import MODE_TD, MODE_TID
from meldistill.errors import ConfigError, ContractError, DataError
from meldistill.inversion import (
    EpochResult,
    InversionSettings,
    MemoryBank,
    adversarial_loss,
    bank_sample,
    bn_stats_loss,
    chunk_bounds,
    chunk_time,
    class_confidence_loss,
    contrastive_loss,
    inversion_epoch,
    inversion_loss,
    invariance_term,
)
from meldistill.nets import Discriminator, build_model, stats_pool
from meldistill.tensor import Parameter, RngState, Tensor, concat, grad_check, kld, no_grad


# -- chunking ---------------------------------------------------------------


def test_chunk_lengths_uneven():
    bounds = chunk_bounds(10, 3, min_chunk_frames=3)
    assert [b - a for a, b in bounds] == [3, 3, 4]


def test_chunk_lengths_even():
    bounds = chunk_bounds(8, 2, min_chunk_frames=4)
    assert [b - a for a, b in bounds] == [4, 4]


def test_chunk_partition_property():
    rng = RngState(0)
    for seed in range(20):
        frames = int(rng.integers(16, 120))
        k = int(rng.integers(2, max(2, frames // 8)))
        data = rng.normal((5, frames))
        chunks = chunk_time(data, k)
        np.testing.assert_array_equal(np.concatenate(chunks.chunks, axis=-1), data)
        assert all(c.shape[-1] >= 8 for c in chunks.chunks)


def test_chunk_too_small_rejected():
    with pytest.raises(ContractError):
        chunk_bounds(15, 2, min_chunk_frames=8)


# -- invariance term ---------------------------------------------------------------


def unit_rows(rows):
    arr = np.asarray(rows, dtype=np.float64)
    return Tensor(arr / np.linalg.norm(arr, axis=1, keepdims=True))


def test_invariance_identical_embeddings():
    e = unit_rows([[1.0, 0.0, 0.0]] * 4)
    assert invariance_term(e).item() == pytest.approx(1.0, abs=1e-12)


def test_invariance_two_orthogonal():
    e = unit_rows([[1.0, 0.0], [0.0, 1.0]])
    assert invariance_term(e).item() == pytest.approx(0.0, abs=1e-12)


def test_invariance_hand_mean_of_three_pairs():
    # pairwise sims {1, 0, 0} -> mean exactly 1/3
    e = unit_rows([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert invariance_term(e).item() == 1.0 / 3.0


def test_invariance_needs_two():
    with pytest.raises(ContractError):
        invariance_term(unit_rows([[1.0, 0.0]]))


def test_invariance_range():
    rng = RngState(1)
    for _ in range(10):
        e = rng.normal((5, 16))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        val = invariance_term(Tensor(e)).item()
        assert -1.0 <= val <= 1.0


# -- contrastive loss ------------------------------------------------------------------


def test_contrastive_hand_value_with_invariance():
    # one sample, one bank negative: sim+ = 1, invariance = 1, sim- = 0, tau = 1 -> -2
    anchors = unit_rows([[1.0, 0.0]])
    positives = unit_rows([[1.0, 0.0]])
    bank = unit_rows([[0.0, 1.0]])
    inv = Tensor(np.array([1.0]))
    loss = contrastive_loss(anchors, positives, bank, inv, tau=1.0)
    assert loss.item() == pytest.approx(-2.0, abs=1e-12)


def test_contrastive_hand_value_without_invariance():
    anchors = unit_rows([[1.0, 0.0]])
    positives = unit_rows([[1.0, 0.0]])
    bank = unit_rows([[0.0, 1.0]])
    loss = contrastive_loss(anchors, positives, bank, None, tau=1.0)
    assert loss.item() == pytest.approx(-1.0, abs=1e-12)


def test_contrastive_none_invariance_equals_zero_invariance():
    rng = RngState(2)
    anchors = Tensor(_unit(rng.normal((4, 8))))
    positives = Tensor(_unit(rng.normal((4, 8))))
    bank = Tensor(_unit(rng.normal((3, 8))))
    a = contrastive_loss(anchors, positives, bank, None, tau=0.07).item()
    zeros = Tensor(np.zeros(4))
    b = contrastive_loss(anchors, positives, bank, zeros, tau=0.07).item()
    assert a == b


def test_contrastive_large_tau_limit():
    rng = RngState(3)
    anchors = Tensor(_unit(rng.normal((3, 6))))
    positives = Tensor(_unit(rng.normal((3, 6))))
    pos_sim = np.clip((anchors.data * positives.data).sum(axis=1), -1, 1)
    tau = 1e8
    got = contrastive_loss(anchors, positives, None, None, tau=tau).item()
    expected = (-pos_sim / tau + math.log(2.0)).mean()  # 2 in-batch negatives each
    assert got == pytest.approx(expected, abs=1e-9)


def test_contrastive_decreases_when_positive_similarity_rises():
    rng = RngState(4)
    anchors = Tensor(_unit(rng.normal((2, 8))))
    base = _unit(rng.normal((2, 8)))
    better = _unit(base + 0.5 * anchors.data)  # move positives toward anchors
    lo = contrastive_loss(anchors, Tensor(better), None, None, tau=0.5).item()
    hi = contrastive_loss(anchors, Tensor(base), None, None, tau=0.5).item()
    assert lo < hi


def test_contrastive_standard_infonce_differs_and_is_positive():
    rng = RngState(5)
    anchors = Tensor(_unit(rng.normal((3, 8))))
    positives = Tensor(_unit(rng.normal((3, 8))))
    plain = contrastive_loss(anchors, positives, None, None, tau=0.2).item()
    standard = contrastive_loss(anchors, positives, None, None, tau=0.2, standard_infonce=True).item()
    assert standard != plain
    assert standard > 0.0  # log-sum includes the numerator, so the ratio is < 1


def test_contrastive_empty_negatives_rejected():
    single = unit_rows([[1.0, 0.0]])
    with pytest.raises(ContractError):
        contrastive_loss(single, single, None, None, tau=1.0)


def _unit(arr):
    return arr / np.linalg.norm(arr, axis=1, keepdims=True)


# -- deep-inversion losses -----------------------------------------------------------------


def test_adversarial_zero_when_models_agree():
    logits = Tensor(RngState(6).normal((4, 3)))
    assert adversarial_loss(logits, Tensor(logits.data.copy()), tau=4.0).item() == 0.0


def test_adversarial_nonpositive_and_matches_negated_kld():
    rng = RngState(7)
    t_logits = Tensor(rng.normal((5, 4)))
    s_logits = Tensor(rng.normal((5, 4)))
    adv = adversarial_loss(t_logits, s_logits, tau=2.0).item()
    assert adv <= 0.0
    assert adv == pytest.approx(-kld(t_logits, s_logits, 2.0).item(), abs=1e-15)


def test_adversarial_bernoulli_hand_value():
    got = adversarial_loss(Tensor([[math.log(2.0), 0.0]]), Tensor([[0.0, 0.0]]), tau=1.0).item()
    assert got == pytest.approx(-0.05663, abs=1e-5)


def test_bn_loss_zero_when_running_stats_match_batch():
    teacher = build_model("tiny_s", 2, RngState(8), dtype=np.float64).eval()
    x = Tensor(RngState(9).normal((3, 40, 24)))
    # Align each BN layer's running stats with the batch stats its input produces,
    # using the same reduction arithmetic the loss uses.
    for i in range(len(teacher.bn_layers())):
        captured: list[Tensor] = []
        teacher.forward_frame_level(Tensor(x.data.copy()), capture_bn_inputs=captured)
        act = captured[i]
        c = act.shape[1]
        mu = act.mean(axis=(0, 2, 3))
        var = ((act - mu.reshape(1, c, 1, 1)) ** 2.0).mean(axis=(0, 2, 3))
        teacher.bn_layers()[i].running_mean = mu.data
        teacher.bn_layers()[i].running_var = var.data
    captured = []
    teacher.forward_frame_level(x, capture_bn_inputs=captured)
    loss = bn_stats_loss(captured, teacher.bn_layers())
    assert loss.item() == 0.0


def test_bn_loss_single_channel_hand_value():
    class FakeBN:
        running_mean = np.zeros(1)
        running_var = np.ones(1)

    act = Tensor(np.ones((2, 1, 3, 3)))  # batch mean 1, batch std ~0 vs running (0, 1)
    loss = bn_stats_loss([act], [FakeBN()])
    sigma_feat = math.sqrt(1e-8)
    sigma_ref = math.sqrt(1.0 + 1e-8)
    assert loss.item() == pytest.approx(1.0 + abs(sigma_feat - sigma_ref), rel=1e-9)


def test_bn_loss_adds_over_layers():
    class FakeBN:
        def __init__(self, mean):
            self.running_mean = np.full(1, mean)
            self.running_var = np.full(1, 1e-8)

    act = Tensor(np.ones((1, 1, 2, 2)))
    one_layer = bn_stats_loss([act], [FakeBN(0.0)]).item()
    two_layers = bn_stats_loss([act, act], [FakeBN(0.0), FakeBN(0.0)]).item()
    assert two_layers == pytest.approx(2 * one_layer, rel=1e-12)
    # mean term contributes exactly 1; sigma terms share the same 1e-8 floor
    assert one_layer == pytest.approx(1.0, abs=1e-4)


def test_inversion_loss_weighted_sum():
    z = Tensor(np.zeros(()))
    assert inversion_loss(z, z, z, 0.0, 0.0, 0.0).item() == 0.0
    got = inversion_loss(Tensor(2.0), Tensor(0.5), Tensor(-0.3), 1.0, 1.0, 1.0).item()
    assert got == pytest.approx(2.2, abs=1e-12)
    with pytest.raises(ConfigError):
        inversion_loss(z, z, z, -1.0, 0.0, 0.0)


def test_inversion_loss_linearity_in_weights():
    bn, cls, adv = Tensor(1.5), Tensor(0.7), Tensor(-0.2)
    single = inversion_loss(bn, cls, adv, 1.0, 2.0, 3.0).item()
    double = inversion_loss(bn, cls, adv, 2.0, 4.0, 6.0).item()
    assert double == pytest.approx(2 * single, rel=1e-12)


def test_full_contrastive_path_gradcheck():
    # 2-sample toy batch through teacher + discriminator, augmented views,
    # chunk invariance, and a bank negative: composite gradient vs differences.
    rng = RngState(10)
    teacher = build_model("tiny_s", 2, rng.derive(0), dtype=np.float64).eval().freeze()
    disc = Discriminator(2 * teacher.frame_dim, rng.derive(1), hidden=16, out_dim=8, dtype=np.float64)
    base = Tensor(rng.derive(2).normal((2, 40, 34)))
    shift = Tensor(np.zeros((2, 1, 1)), requires_grad=True)
    bank_raw = Tensor(rng.derive(3).normal((2, 40, 34)))
    bounds = chunk_bounds(34, 2, min_chunk_frames=11)
    # Bank embeddings are per-step constants: snapshot them once, as the
    # epoch loop does, so differencing measures only the live paths.
    with no_grad():
        bank_emb = disc.project(teacher.forward_pooled(bank_raw))

    def loss():
        x = base + shift
        pooled = teacher.forward_pooled(x)
        anchors = disc.project(pooled)
        views = [x.slice_axis(0, i, i + 1).slice_axis(2, 3, 31) for i in range(2)]
        positives = concat([disc.project(teacher.forward_pooled(v)) for v in views], axis=0)
        inv_rows = []
        for i in range(2):
            embs = [
                disc.project(teacher.forward_pooled(x.slice_axis(0, i, i + 1).slice_axis(2, a, b)))
                for a, b in bounds
            ]
            inv_rows.append(invariance_term(concat(embs, axis=0)).reshape(1))
        return contrastive_loss(anchors, positives, bank_emb, concat(inv_rows, axis=0), tau=0.5)

    report = grad_check(loss, [shift, disc.fc2.bias, disc.fc1.bias], eps=1e-5)
    assert report.max_rel_err < 1e-4, str(report)


def test_deep_inversion_objective_gradcheck():
    rng = RngState(11)
    teacher = build_model("tiny_s", 2, rng.derive(0), dtype=np.float64).eval().freeze()
    student = build_model("tiny_s", 2, rng.derive(1), dtype=np.float64).eval().freeze()
    base = Tensor(rng.derive(2).normal((2, 40, 20)))
    shift = Tensor(np.zeros((2, 1, 1)), requires_grad=True)
    targets = np.array([0, 1])

    def loss():
        x = base + shift
        captured: list[Tensor] = []
        logits = teacher.forward_logits(x, capture_bn_inputs=captured)
        cls = class_confidence_loss(logits, targets)
        adv = adversarial_loss(logits, student.forward_logits(x), tau=4.0)
        bn = bn_stats_loss(captured, teacher.bn_layers())
        return inversion_loss(bn, cls, adv, 1.0, 1.0, 1.0)

    report = grad_check(loss, [shift], eps=1e-5)
    assert report.max_rel_err < 1e-4, str(report)


# -- memory bank ------------------------------------------------------------------------------


def _bank_with(rng, entries=2, batch=4, frames=20):
    bank = MemoryBank()
    for e in range(entries):
        bank.append(rng.normal((batch, 8, frames)), epoch=e + 1, loss=float(e), targets=np.arange(batch) % 2)
    return bank


def test_bank_one_entry_per_epoch_and_sample_contract():
    rng = RngState(12)
    bank = MemoryBank()
    assert bank.sample(3, rng).size == 0
    bank.append(rng.normal((4, 8, 20)), epoch=1, loss=0.5, targets=np.zeros(4))
    assert len(bank) == 1
    assert bank.sample(0, rng).shape == (0, 8, 20)
    drawn = bank.sample(16, rng)
    assert drawn.shape == (16, 8, 20)
    rows = {tuple(np.round(r.ravel()[:4], 5)) for r in drawn}
    source = {tuple(np.round(r.ravel()[:4], 5)) for r in bank.entries[0].batch}
    assert rows <= source


def test_bank_sampling_deterministic():
    bank = _bank_with(RngState(13))
    a = bank_sample(bank, 10, RngState(99))
    b = bank_sample(bank, 10, RngState(99))
    np.testing.assert_array_equal(a, b)


def test_bank_roundtrip_bitexact(tmp_path):
    bank = _bank_with(RngState(14), entries=3)
    bank.save(tmp_path / "bank")
    loaded = MemoryBank.load(tmp_path / "bank")
    assert len(loaded) == 3
    loaded.save(tmp_path / "bank2")
    for name in sorted(p.name for p in (tmp_path / "bank").iterdir()):
        assert (tmp_path / "bank" / name).read_bytes() == (tmp_path / "bank2" / name).read_bytes(), name


def test_bank_load_detects_corruption(tmp_path):
    bank = _bank_with(RngState(15))
    bank.save(tmp_path / "bank")
    target = tmp_path / "bank" / "entry_0000.f32"
    payload = bytearray(target.read_bytes())
    payload[3] ^= 0x10
    target.write_bytes(bytes(payload))
    with pytest.raises(DataError, match="hash"):
        MemoryBank.load(tmp_path / "bank")


# -- epoch loop -------------------------------------------------------------------------------


def _tiny_setup(seed=0, class_count=2):
    rng = RngState(seed)
    teacher = build_model("tiny_s", class_count, rng.derive(0), dtype=np.float64).eval().freeze()
    student = build_model("tiny_s", class_count, rng.derive(1), dtype=np.float64).eval().freeze()
    disc = Discriminator(2 * teacher.frame_dim, rng.derive(2), hidden=16, out_dim=8, dtype=np.float64)
    return teacher, student, disc


def _tiny_settings(**overrides):
    defaults = dict(steps=4, batch_size=3, latent_dim=8, k_min=2, k_max=2,
                    min_chunk_frames=8, lr=1e-2, mode=MODE_TID)
    defaults.update(overrides)
    return InversionSettings(**defaults)


def test_inversion_epoch_trace_and_result_contract():
    teacher, student, disc = _tiny_setup()
    bank = MemoryBank()
    result = inversion_epoch(teacher, student, disc, bank, _tiny_settings(), RngState(20), epoch=1,
                             mel_bins=40, frames=40)
    assert len(result.loss_trace) == 4
    assert result.best_loss == min(result.loss_trace)
    assert result.best_step == int(np.argmin(result.loss_trace))
    assert result.best_batch.shape == (3, 40, 40)
    assert result.best_batch.dtype == np.dtype("<f4")
    assert result.targets.tolist() == [0, 1, 0]


def test_inversion_epoch_bank_grows_one_entry_per_epoch():
    teacher, student, disc = _tiny_setup()
    bank = MemoryBank()
    for epoch in (1, 2, 3):
        res = inversion_epoch(teacher, student, disc, bank, _tiny_settings(), RngState(20 + epoch),
                              epoch=epoch, mel_bins=40, frames=40)
        bank.append(res.best_batch, epoch, res.best_loss, res.targets)
        assert len(bank) == epoch


def test_inversion_epoch_deterministic():
    def run():
        teacher, student, disc = _tiny_setup(seed=5)
        bank = MemoryBank()
        res = inversion_epoch(teacher, student, disc, bank, _tiny_settings(), RngState(77), epoch=1,
                              mel_bins=40, frames=40)
        return np.asarray(res.loss_trace), res.best_batch

    trace1, batch1 = run()
    trace2, batch2 = run()
    np.testing.assert_array_equal(trace1, trace2)
    np.testing.assert_array_equal(batch1, batch2)


def test_inversion_epoch_without_contrastive_skips_discriminator():
    teacher, student, disc = _tiny_setup()
    before = [p.data.copy() for p in disc.parameters()]
    bank = MemoryBank()
    res = inversion_epoch(teacher, student, disc, bank, _tiny_settings(), RngState(30), epoch=1,
                          mel_bins=40, frames=40, use_fic=False)
    for p, b in zip(disc.parameters(), before):
        np.testing.assert_array_equal(p.data, b)
    assert res.component_means["fic"] == 0.0


def test_inversion_epoch_infeasible_chunking_rejected():
    teacher, student, disc = _tiny_setup()
    cfg = _tiny_settings(k_min=4, k_max=4)
    with pytest.raises(ConfigError, match="chunk"):
        inversion_epoch(teacher, student, disc, MemoryBank(), cfg, RngState(1), epoch=1,
                        mel_bins=40, frames=40)


def test_inversion_epoch_improves_targeted_confidence():
    teacher, student, disc = _tiny_setup(seed=9)
    cfg = _tiny_settings(steps=30, batch_size=4, lr=5e-2, gamma=0.0)
    res = inversion_epoch(teacher, student, disc, MemoryBank(), cfg, RngState(41), epoch=1,
                          mel_bins=40, frames=40)

    def mean_target_confidence(batch):
        from meldistill.tensor import no_grad

        with no_grad():
            logits = teacher.forward_logits(Tensor(batch.astype(np.float64)))
        probs = logits.softmax().data
        return float(probs[np.arange(len(res.targets)), res.targets].mean())

    assert mean_target_confidence(res.best_batch) > mean_target_confidence(res.first_batch)
