import dataclasses
import struct

import numpy as np
import pytest

from frappe_lite import data
from frappe_lite.alignment import DistilledTeacher, make_teachers
from frappe_lite.checkpoint import (CheckpointFormatError, encode_checkpoint, load_checkpoint, save_checkpoint)
from frappe_lite.data import DataError
from frappe_lite.mipa import ConfigError
from frappe_lite.nn import registry_hash
from frappe_lite.policy import PolicyModel
from frappe_lite.training import (TrainConfig, TrainingError, init_experts, load_experts, load_policy, mid_train,
                                  pipeline_gradcheck, post_train, prepare_batch, registry, teacher_targets,
                                  total_loss, trainable_set)


@pytest.fixture(scope="module")
def sets():
    eps = data.generate_datasets({"robot": 2, "ego_task": 2}, seed=0)
    return data.TrajectoryDataset(eps["robot"], "robot"), data.TrajectoryDataset(eps["ego_task"], "ego_task")


@pytest.fixture(scope="module")
def teacher():
    return DistilledTeacher(seed=0).freeze()


@pytest.fixture(scope="module")
def teachers():
    return make_teachers()


def _batch(sets, robot=2, ego=2, seed=0):
    rng = np.random.default_rng(seed)
    parts = []
    if robot:
        parts.append(sets[0].batch(rng.integers(len(sets[0]), size=robot)))
    if ego:
        parts.append(sets[1].batch(rng.integers(len(sets[1]), size=ego)))
    return prepare_batch(data.merge_batches(parts), PolicyModel(seed=0).schedule, rng)


# ------------------------------------------------------------------ config

def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.lambda1, c.lambda2, c.smoothing, c.horizon, c.lr, c.batch_size) == (0.05, 0.01, 0.1, 8, 1e-4, 16)
    assert (c.mid_steps, c.post_steps) == (3000, 1000)
    for bad in ({"lambda1": -1}, {"lambda2": -0.1}, {"mid_steps": 0, "post_steps": 0}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_config_text_roundtrip_and_errors(tmp_path):
    c = TrainConfig(lambda1=0.2, seed=4, ratios=(0.5, 0.5, 0.0), use_lora=False)
    p = tmp_path / "c.cfg"
    p.write_text(c.to_text())
    assert TrainConfig.from_file(p) == c
    assert TrainConfig.from_file(p, seed=9).seed == 9
    with pytest.raises(ConfigError, match="unknown key"):
        TrainConfig.from_text("lambda3=1")
    with pytest.raises(ConfigError):
        TrainConfig.from_text("mid_steps=many")
    with pytest.raises(ConfigError):
        TrainConfig.from_text("just words")


# ------------------------------------------------------------------ losses

def test_weight_collapse_gives_action_loss(sets, teacher):
    m = PolicyModel(seed=1)
    b = _batch(sets)
    parts = total_loss(b, "mid", m, teachers=teacher, config=TrainConfig(lambda1=0.0, lambda2=0.0))
    assert float(parts.total.data) == float(parts.action.data)


def test_component_accounting_mid_and_post(sets, teacher, teachers):
    cfg = TrainConfig(lambda1=0.3, lambda2=0.07)
    m = PolicyModel(seed=2)
    b = _batch(sets, 3, 2, seed=1)
    mid = total_loss(b, "mid", m, teachers=teacher, config=cfg)
    assert abs(float(mid.total.data) - (float(mid.action.data) + 0.3 * float(mid.align.data))) < 1e-6
    assert mid.balance is None
    ex = init_experts(m, cfg, 3)
    post = total_loss(b, "post", m, ex, teachers=teachers, config=cfg)
    expect = float(post.action.data) + 0.3 * float(post.align.data) + 0.07 * float(post.balance.data)
    assert abs(float(post.total.data) - expect) < 1e-6
    np.testing.assert_allclose(float(post.align.data), post.align_each.data.sum(), atol=1e-6)


def test_components_match_independent_recomputation(sets, teacher):
    from frappe_lite.alignment import align_loss_single
    from frappe_lite.autograd import Tensor, no_grad

    m = PolicyModel(seed=3)
    b = _batch(sets, 2, 2, seed=2)
    parts = total_loss(b, "mid", m, teachers=teacher, config=TrainConfig())
    with no_grad():
        out = m.forward(b["obs"], b["proprio"], b["instruction"], b["noisy"], b["k"])
        pred = m.decode(out.latents[0]).data
        mask = b["has_actions"]
        action = np.mean((pred[mask] - b["actions"][mask]) ** 2)
        align = float(align_loss_single(out.prefix[0], m.align_proj, teacher.encode(b["future_obs"])).data)
    assert abs(float(parts.action.data) - action) < 1e-6
    assert abs(float(parts.align.data) - align) < 1e-6


def test_action_free_batch_has_zero_action_gradient(sets, teacher):
    m = PolicyModel(seed=4)
    b = _batch(sets, robot=0, ego=4)
    parts = total_loss(b, "mid", m, teachers=teacher, config=TrainConfig())
    assert float(parts.action.data) == 0.0
    parts.total.backward()
    for _, p in m.head.named_parameters():
        assert p.grad is None or np.all(p.grad == 0)
    assert m.prefix.grad is not None and np.any(m.prefix.grad != 0)


def test_missing_future_frames_is_a_data_error(sets, teacher):
    b = _batch(sets)
    b["future_obs"] = None
    with pytest.raises(DataError):
        total_loss(b, "mid", PolicyModel(seed=0), teachers=teacher)
    with pytest.raises(DataError):
        prepare_batch({"obs": np.zeros((0, 3, 32, 32))}, PolicyModel(seed=0).schedule, np.random.default_rng(0))


def test_pipeline_gradcheck():
    for stage in ("mid", "post"):
        assert pipeline_gradcheck(seed=1, stage=stage, coords=20)["max_rel_error"] < 1e-3


# ------------------------------------------------------------ trainable sets

def test_trainable_sets(teachers):
    m = PolicyModel(seed=0)
    ex = init_experts(m, TrainConfig(), 3)
    mid = trainable_set("mid", m)
    assert "prefix" in mid.names and "align_proj" in mid.names and "head.fc1.weight" in mid.names
    post = trainable_set("post", m, ex)
    assert all(n.startswith(("expert.", "router.")) for n in post.names)
    total = m.num_parameters() + ex.num_parameters()
    assert ex.num_parameters() < 0.10 * total
    with pytest.raises(ConfigError):
        init_experts(m, TrainConfig(), 2)


def test_post_prefix_copied_from_mid_bank():
    m = PolicyModel(seed=5)
    ex = init_experts(m, TrainConfig(), 3)
    for e in ex.experts:
        np.testing.assert_array_equal(e.prefix.data, m.prefix.data)
        assert all(np.all(U.data == 0) for _, U in e.lora.values())
    assert np.all(ex.router.fc2.weight.data == 0)


# --------------------------------------------------------------- loops

def _cfg(**kw):
    base = dict(mid_steps=6, post_steps=4, batch_size=4, log_every=0, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_mid_train_short_run(tmp_path, sets, teacher):
    cfg = _cfg(ratios=(0.5, 0.5, 0.0))
    m = PolicyModel(seed=0)
    thash = registry_hash(list(teacher.named_parameters()))
    res = mid_train(m, teacher, data.build_cotrain_sampler(sets[0], sets[1], None, cfg.ratios, 0, 4), cfg,
                    metrics_path=tmp_path / "mid.csv", checkpoint_path=tmp_path / "mid.frap")
    assert len(res.history) == 6
    rows = (tmp_path / "mid.csv").read_text().strip().splitlines()
    assert rows[0].split(",") == ["step", "loss_total", "loss_action", "loss_align", "loss_balance", "grad_norm"]
    assert len(rows) == 7
    assert registry_hash(list(teacher.named_parameters())) == thash
    ck = load_checkpoint(tmp_path / "mid.frap")
    assert any(k.startswith("theia_lite.") for k in ck) and "prefix" in ck


def test_mid_train_requires_frozen_teacher(sets):
    live = DistilledTeacher(seed=0)
    with pytest.raises(ConfigError):
        mid_train(PolicyModel(seed=0), live, data.uniform_sampler(sets[0], 0, 4), _cfg())


def test_post_train_freeze_contract(tmp_path, sets, teachers):
    cfg = _cfg()
    m = PolicyModel(seed=0)
    before = registry_hash(list(m.named_parameters()))
    t_before = [registry_hash(list(t.named_parameters())) for t in teachers]
    ex, res = post_train(m, teachers, data.uniform_sampler(sets[0], 0, 4), cfg,
                         metrics_path=tmp_path / "post.csv", checkpoint_path=tmp_path / "post.frap")
    assert registry_hash(list(m.named_parameters())) == before
    assert [registry_hash(list(t.named_parameters())) for t in teachers] == t_before
    assert res.frozen_hash_before == res.frozen_hash_after
    header = (tmp_path / "post.csv").read_text().splitlines()[0].split(",")
    assert header == ["step", "loss_total", "loss_action", "loss_align", "loss_align_0", "loss_align_1",
                      "loss_align_2", "loss_balance", "w_0", "w_1", "w_2", "grad_norm"]
    assert any(np.any(U.data != 0) for e in ex.experts for _, U in e.lora.values())
    with pytest.raises(ConfigError):
        post_train(m, teachers[:2], data.uniform_sampler(sets[0], 0, 4), cfg)


def test_teacher_params_never_in_optimizer(sets, teachers, monkeypatch):
    from frappe_lite import training

    seen = []
    real = training.Adam

    def spy(params, **kw):
        seen.extend(id(p) for p in params)
        return real(params, **kw)

    monkeypatch.setattr(training, "Adam", spy)
    post_train(PolicyModel(seed=0), teachers, data.uniform_sampler(sets[0], 0, 4), _cfg(post_steps=1))
    teacher_ids = {id(p) for t in teachers for p in t.parameters()}
    assert seen and not teacher_ids & set(seen)


def test_nan_aborts_and_dumps_last_good(tmp_path, sets, teacher):
    m = PolicyModel(seed=0)
    m.head.fc2.bias.data = np.array([np.nan, 0, 0], np.float32)
    with pytest.raises(TrainingError, match="non-finite"):
        mid_train(m, teacher, data.uniform_sampler(sets[0], 0, 4), _cfg(), checkpoint_path=tmp_path / "m.frap")
    assert (tmp_path / "m.frap.lastgood").exists()


def test_training_is_deterministic(tmp_path, sets, teacher):
    hashes = []
    for run in ("a", "b"):
        m = PolicyModel(seed=3)
        res = mid_train(m, teacher, data.uniform_sampler(sets[0], 3, 4), _cfg(seed=3),
                        checkpoint_path=tmp_path / run / "mid.frap")
        hashes.append(res.checkpoint_hash)
    assert hashes[0] == hashes[1]


def test_mid_checkpoint_into_post_stage(tmp_path, sets, teacher, teachers):
    m = PolicyModel(seed=0)
    mid_train(m, teacher, data.uniform_sampler(sets[0], 0, 4), _cfg(), checkpoint_path=tmp_path / "mid.frap")
    tensors = load_checkpoint(tmp_path / "mid.frap")
    m2 = load_policy(tensors)
    assert load_experts(m2, tensors) is None
    for (n, p), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n == n2 and p.data.tobytes() == p2.data.tobytes()
    ex, _ = post_train(m2, teachers, data.uniform_sampler(sets[0], 0, 4), _cfg(),
                       checkpoint_path=tmp_path / "post.frap")
    post = load_checkpoint(tmp_path / "post.frap")
    new = set(post) - set(tensors)
    assert new == {n for n, _ in ex.named_parameters()}
    m3 = load_policy(post)
    ex3 = load_experts(m3, post)
    assert registry_hash(list(registry(m3, ex3).items())) == registry_hash(list(registry(m2, ex).items()))


# ------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    m = PolicyModel(seed=7)
    save_checkpoint(tmp_path / "c.frap", m.named_parameters())
    back = load_checkpoint(tmp_path / "c.frap")
    for n, p in m.named_parameters():
        assert back[n].tobytes() == p.data.tobytes() and back[n].shape == p.shape


def test_checkpoint_format_errors(tmp_path):
    blob = encode_checkpoint([("a", np.ones((2, 3), np.float32)), ("b", np.zeros(4, np.float32))])
    p = tmp_path / "x.frap"
    for bad, msg in ((b"NOPE" + blob[4:], "magic"), (blob[:-3], "truncated"),
                     (blob[:4] + struct.pack("<I", 7) + blob[8:], "version"), (blob + b"\0", "trailing")):
        p.write_bytes(bad)
        with pytest.raises(CheckpointFormatError, match=msg):
            load_checkpoint(p)
    with pytest.raises(CheckpointFormatError, match="duplicate"):
        encode_checkpoint([("a", np.ones(1)), ("a", np.ones(1))])
    dup = encode_checkpoint([("a", np.ones(1)), ("b", np.ones(1))]).replace(b"\x01\x00\x00\x00b", b"\x01\x00\x00\x00a")
    p.write_bytes(dup)
    with pytest.raises(CheckpointFormatError, match="duplicate"):
        load_checkpoint(p)


def test_checkpoint_layout():
    blob = encode_checkpoint([("w", np.arange(6, dtype=np.float32).reshape(2, 3))])
    assert blob[:4] == b"FRAP"
    assert struct.unpack_from("<II", blob, 4) == (1, 1)
    assert struct.unpack_from("<I", blob, 12) == (1,) and blob[16:17] == b"w"
    assert struct.unpack_from("<III", blob, 17) == (2, 2, 3)
    np.testing.assert_array_equal(np.frombuffer(blob[29:], "<f4"), np.arange(6))
