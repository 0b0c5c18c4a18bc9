import numpy as np
import pytest
from scipy.stats import chisquare

from lvnas.architecture import Genome, LayerKind, ModelConfig, parse_genome, random_genome
from lvnas.config import TrainConfig
from lvnas.data import Corpus, Vocab, apply_mlm_masking, gen_synthetic_corpus, split_train_val
from lvnas.model import Model, mlm_step
from lvnas.optim import Adam
from lvnas.supernet import (
    PathError, Supernet, evaluate_mlm_accuracy, evaluate_path, inherit_weights, sample_path,
    supernet_forward, supernet_train_step,
)
from lvnas.tensor import make_rng
from lvnas.train import load_model, mask_validation, pretrain_supernet, save_model

CFG = ModelConfig(vocab_size=13, word_emb_size=6, hidden_size=8, num_heads=2, head_dim=4, ff_ratio=2,
                  kernel_size=3, seq_len=8, max_position=8, dropout=0.1, num_layers=4)


@pytest.fixture
def sn():
    return Supernet(CFG, make_rng(0))


def batch(rng, b=3):
    return apply_mlm_masking(rng, rng.integers(3, 13, size=(b, 8)), 0.3)


def snapshot(params):
    return {k: p.value.copy() for k, p in params.items()}


def test_slot_inventory(sn):
    names = sn.named_parameters()
    for i in range(4):
        for slot in ("dc", "sa", "ff"):
            assert any(n.startswith(f"pos{i}.{slot}.") for n in names)
    assert not any(n.startswith("pos4.") for n in names)
    # embeddings and head exist once and every path sees the same objects
    a, b = sn.path_model(parse_genome("cccc", 4)), sn.path_model(parse_genome("ssff", 4))
    assert a.named_parameters()["emb.token_table"] is b.named_parameters()["emb.token_table"]
    assert a.named_parameters()["head.out_bias"] is b.named_parameters()["head.out_bias"]


def test_inherited_logits_equal_supernet_bitwise(sn, rng):
    for _ in range(20):
        g = sample_path(rng, 4)
        x = rng.integers(0, 13, size=(2, 8))
        a = supernet_forward(sn, g, x)
        b = inherit_weights(sn, g).forward(x)
        assert a.tobytes() == b.tobytes()


def test_distinct_slots_give_distinct_logits(sn, rng):
    x = rng.integers(0, 13, size=(2, 8))
    assert not np.array_equal(sn.forward(parse_genome("fsfc", 4), x), sn.forward(parse_genome("ssfc", 4), x))


def test_gradients_only_on_selected_slots(sn, rng):
    g = parse_genome("csfs", 4)
    sn.zero_grad()
    mlm_step(sn.path_model(g), batch(rng))
    for name, p in sn.named_parameters().items():
        if name.startswith("pos"):
            i, slot = name.split(".")[:2]
            selected = g.kinds[int(i[3:])].slot == slot
            assert p.grad.any() == selected, name
        else:
            assert p.grad.any(), name


def test_train_step_touches_only_selected_slots(sn, rng):
    opt = Adam(sn.named_parameters(), 1e-2)
    for _ in range(3):
        before = snapshot(sn.named_parameters())
        _, path = supernet_train_step(sn, rng, batch(rng), opt, dropout_rng=rng)
        selected = {f"pos{i}.{k.slot}." for i, k in enumerate(path)}
        for name, p in sn.named_parameters().items():
            moved = not np.array_equal(before[name], p.value)
            if name.startswith("pos") and not any(name.startswith(s) for s in selected):
                assert before[name].tobytes() == p.value.tobytes(), name
                assert opt.state[name].t == 0 or not moved
            elif not name.endswith(("ln_beta", "b_out")):
                assert moved or not p.grad.any(), name


def test_fixed_path_reduces_to_standalone_training(rng):
    g = parse_genome("cfsf", 4)
    sn = Supernet(CFG, make_rng(3))
    model = inherit_weights(sn, g)
    opt_sn = Adam(sn.named_parameters(), 1e-2)
    opt_m = Adam(model.named_parameters(), 1e-2)
    for seed in range(4):
        b = batch(make_rng(seed))
        supernet_train_step(sn, rng, b, opt_sn, path=g)
        mlm_step(model, b)
        opt_m.step()
    x = rng.integers(0, 13, size=(2, 8))
    assert sn.forward(g, x).tobytes() == model.forward(x).tobytes()


def test_sample_path_uniform_single_position():
    rng = make_rng(11)
    counts = np.bincount([sample_path(rng, 1).kinds[0].value for _ in range(9000)], minlength=3)
    assert (np.abs(counts - 3000) <= 150).all(), counts


def test_sample_path_reproducible_and_independent():
    a = [sample_path(make_rng(5), 24) for _ in range(2)]
    assert a[0] == a[1]
    rng = make_rng(6)
    codes = np.array([sample_path(rng, 24).codes() for _ in range(10_000)], dtype=float)
    corr = np.corrcoef(codes.T)
    off_diag = corr[~np.eye(24, dtype=bool)]
    assert np.abs(off_diag).max() <= 0.05
    with pytest.raises(PathError):
        sample_path(rng, 0)


def test_slot_selection_chi_square_over_training_steps():
    """Every position's slot counts over 3,000 training-step paths are uniform at significance 0.001."""
    cfg = ModelConfig(vocab_size=13, word_emb_size=4, hidden_size=4, num_heads=1, head_dim=4, ff_ratio=1,
                      kernel_size=3, seq_len=8, max_position=8, dropout=0.0, num_layers=8)
    sn = Supernet(cfg, make_rng(0))
    corpus = gen_synthetic_corpus(0, 50, 8, 13, "local")
    log = pretrain_supernet(sn, corpus, TrainConfig(lr=1e-3, warmup_steps=10, steps=3000, batch_size=1,
                                                    log_every=1000), seed=4)
    paths = np.array([parse_genome(p, 8).codes() for p in log.paths])
    assert paths.shape == (3000, 8)
    for pos in range(8):
        counts = np.bincount(paths[:, pos], minlength=3)
        assert (np.abs(counts - 1000) <= 100).all()
        assert chisquare(counts).pvalue > 0.001


def test_path_length_checked(sn, rng):
    with pytest.raises(PathError):
        sn.forward(parse_genome("csf", 3), rng.integers(0, 13, size=(1, 8)))


def test_inheritance_isolation(sn, rng):
    g = parse_genome("sfcs", 4)
    before = snapshot(sn.named_parameters())
    child = inherit_weights(sn, g)
    opt = Adam(child.named_parameters(), 1e-2)
    for _ in range(3):
        mlm_step(child, batch(rng))
        opt.step()
    after = snapshot(sn.named_parameters())
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    # and the other direction
    x = rng.integers(0, 13, size=(2, 8))
    ref = child.forward(x)
    for p in sn.named_parameters().values():
        p.value += 1.0
    assert child.forward(x).tobytes() == ref.tobytes()


def test_inherit_save_load_round_trip(sn, rng, tmp_path):
    g = parse_genome("csff", 4)
    child = inherit_weights(sn, g)
    save_model(tmp_path / "m.lvsn", child)
    back, meta = load_model(tmp_path / "m.lvsn")
    assert back.genome == g and meta["kind"] == "model"
    x = rng.integers(0, 13, size=(3, 8))
    assert back.forward(x).tobytes() == child.forward(x).tobytes() == sn.forward(g, x).tobytes()


def test_evaluation_is_deterministic_and_near_chance_untrained():
    cfg = ModelConfig(vocab_size=40, word_emb_size=8, hidden_size=8, num_heads=2, head_dim=4, ff_ratio=2,
                      kernel_size=3, seq_len=20, max_position=20, dropout=0.1, num_layers=3)
    corpus = gen_synthetic_corpus(1, 1500, 20, 40, "global")
    val = mask_validation(corpus, 0, TrainConfig())
    accs = []
    for seed in range(4):
        sn = Supernet(cfg, make_rng(seed))
        g = random_genome(make_rng(seed + 100), 3)
        a = evaluate_path(sn, g, val)
        assert a == evaluate_path(sn, g, val)
        accs.append(a)
    n = val.mask.sum() * 4
    assert abs(np.mean(accs) - 1 / 37) < 5 * np.sqrt((1 / 37) / n) + 0.01


def test_perfect_memory_toy():
    """Two content tokens and a constant corpus: any path learns to predict it exactly."""
    cfg = ModelConfig(vocab_size=5, word_emb_size=4, hidden_size=4, num_heads=1, head_dim=4, ff_ratio=1,
                      kernel_size=3, seq_len=8, max_position=8, dropout=0.0, num_layers=2)
    sn = Supernet(cfg, make_rng(0))
    seqs = np.full((20, 8), 4)
    corpus = Corpus(seqs, Vocab.synthetic(5))
    pretrain_supernet(sn, corpus, TrainConfig(lr=1e-2, warmup_steps=5, steps=60, batch_size=2), seed=0)
    val = mask_validation(corpus, 0, TrainConfig())
    for g in ("cc", "ss", "ff", "cs"):
        assert evaluate_path(sn, parse_genome(g, 2), val) == 1.0


def test_supernet_learns_above_chance():
    cfg = ModelConfig(vocab_size=16, word_emb_size=16, hidden_size=16, num_heads=2, head_dim=8, ff_ratio=2,
                      kernel_size=5, seq_len=16, max_position=16, dropout=0.0, num_layers=2)
    corpus = gen_synthetic_corpus(0, 2000, 16, 16, "local")
    tr, va = split_train_val(corpus, 0.1)
    sn = Supernet(cfg, make_rng(0))
    pretrain_supernet(sn, tr, TrainConfig(lr=3e-3, warmup_steps=100, steps=2000, batch_size=8, log_every=500), seed=0)
    val = mask_validation(va, 0, TrainConfig())
    accs = [evaluate_path(sn, parse_genome(g, 2), val) for g in ("cf", "sf", "fc")]
    chance, n = 1 / 13, val.mask.sum()
    assert min(accs) > chance + 4 * np.sqrt(chance * (1 - chance) / n), accs


def test_evaluate_rejects_empty():
    m = Model(parse_genome("c", 1), ModelConfig(vocab_size=13, word_emb_size=4, hidden_size=4, num_heads=1,
                                                  head_dim=4, ff_ratio=1, kernel_size=3, seq_len=8,
                                                  max_position=8, num_layers=1), 0)
    empty = apply_mlm_masking(make_rng(0), np.full((1, 8), 5), 0.3)
    empty.inputs, empty.targets, empty.mask = empty.inputs[:0], empty.targets[:0], empty.mask[:0]
    with pytest.raises(ValueError):
        evaluate_mlm_accuracy(m, empty)
