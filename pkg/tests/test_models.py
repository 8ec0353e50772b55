import numpy as np
import pytest
import torch

from epr.models import (DivergenceError, as_tensor, build_model, evaluate, forward, load_checkpoint,
                        predict_topk, save_checkpoint, sgd_step)


def _batch(n=6, seed=0, size=16):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, size, size, 3)).astype(np.float32)


class TestBuild:
    def test_seeded_init(self):
        a = build_model("small-cnn", 2, 2, seed=4, input_shape=(16, 16, 3))
        b = build_model("small-cnn", 2, 2, seed=4, input_shape=(16, 16, 3))
        c = build_model("small-cnn", 2, 2, seed=5, input_shape=(16, 16, 3))
        for p, q in zip(a.parameters(), b.parameters()):
            assert torch.equal(p, q)
        assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))

    def test_global_rng_untouched(self):
        torch.manual_seed(0)
        expected = torch.rand(1)
        torch.manual_seed(0)
        build_model("small-cnn", 1, 2, seed=9, input_shape=(16, 16, 3))
        assert torch.equal(torch.rand(1), expected)

    def test_resnet_head_shapes(self):
        m = build_model("reduced-resnet18", 3, 5, input_shape=(32, 32, 3))
        assert m.backbone.out_features == 160
        assert forward(m, _batch(2, size=32), 2).shape == (2, 5)

    @pytest.mark.parametrize("arch", ["vgg", "mlp"])
    def test_unknown_arch(self, arch):
        with pytest.raises(ValueError):
            build_model(arch, 1, 2)

    def test_unknown_target(self):
        with pytest.raises(ValueError):
            build_model("small-cnn", 1, 2, target_layer="nope")

    def test_shape_check(self):
        m = build_model("small-cnn", 1, 2, input_shape=(16, 16, 3))
        with pytest.raises(ValueError):
            as_tensor(np.zeros((1, 8, 8, 3)), m)


class TestHeads:
    def test_mixed_batch_routes_per_example(self):
        m = build_model("small-cnn", 3, 2, seed=0, input_shape=(16, 16, 3))
        x = _batch(4)
        mixed = forward(m, x, np.array([0, 1, 2, 1]))
        for i, t in enumerate([0, 1, 2, 1]):
            np.testing.assert_allclose(mixed[i], forward(m, x[i : i + 1], t)[0], rtol=1e-5, atol=1e-6)

    def test_step_leaves_other_heads(self):
        m = build_model("small-cnn", 3, 2, seed=0, input_shape=(16, 16, 3))
        before = [h.weight.detach().clone() for h in m.heads]
        sgd_step(m, _batch(4), np.array([2, 3, 2, 3]), np.array([1, 1, 1, 1]), 0.1)
        assert torch.equal(m.heads[0].weight, before[0]) and torch.equal(m.heads[2].weight, before[2])
        assert not torch.equal(m.heads[1].weight, before[1])

    def test_label_outside_head(self):
        m = build_model("small-cnn", 2, 2, input_shape=(16, 16, 3))
        with pytest.raises(ValueError):
            sgd_step(m, _batch(1), np.array([3]), np.array([0]), 0.1)


class TestSGD:
    def test_matches_manual_update(self):
        m = build_model("small-cnn", 2, 2, seed=1, input_shape=(16, 16, 3))
        ref = build_model("small-cnn", 2, 2, seed=1, input_shape=(16, 16, 3))
        x, labels, tasks = _batch(5), np.array([0, 1, 2, 3, 0]), np.array([0, 0, 1, 1, 0])
        loss = sgd_step(m, x, labels, tasks, 0.05)
        xt = torch.from_numpy(x).permute(0, 3, 1, 2)
        out = ref(xt, torch.from_numpy(tasks))
        targets = torch.tensor([0, 1, 0, 1, 0])
        ref_loss = torch.nn.functional.cross_entropy(out, targets)
        ref_loss.backward()
        assert loss == pytest.approx(ref_loss.item(), rel=1e-6)
        for p, q in zip(m.parameters(), ref.parameters()):
            expected = q.detach() - 0.05 * (q.grad if q.grad is not None else 0)
            torch.testing.assert_close(p.detach(), expected, rtol=1e-5, atol=1e-6)

    def test_divergence(self):
        m = build_model("small-cnn", 1, 2, input_shape=(16, 16, 3))
        with pytest.raises(DivergenceError):
            sgd_step(m, np.full((2, 16, 16, 3), np.nan, np.float32), np.array([0, 1]), np.array([0, 0]), 0.1)

    def test_learns_separable_task(self):
        from epr.data import build_split_stream
        from epr.models import model_for_stream

        stream = build_split_stream("synthetic", 1, 2, 0, per_class_train=100, per_class_test=20, width=16)
        m = model_for_stream("small-cnn", stream, 0)
        task = stream.tasks[0]
        for _ in range(10):
            for s in range(0, task.n_train, 10):
                sgd_step(m, task.train_images[s : s + 10], task.train_labels[s : s + 10],
                         np.zeros(len(task.train_labels[s : s + 10]), int), 0.1)
        assert evaluate(m, task) > 0.8


class TestTopK:
    def test_tie_breaks_by_id(self):
        m = build_model("small-cnn", 1, 4, input_shape=(16, 16, 3))
        with torch.no_grad():
            for p in m.heads[0].parameters():
                p.zero_()
        assert predict_topk(m, _batch(1)[0], 0, 3) == [0, 1, 2]

    def test_k_range(self):
        m = build_model("small-cnn", 1, 2, input_shape=(16, 16, 3))
        with pytest.raises(ValueError):
            predict_topk(m, _batch(1)[0], 0, 3)


def test_checkpoint_round_trip(tmp_path, tiny_stream):
    from epr.models import model_for_stream

    m = model_for_stream("small-cnn", tiny_stream, 3)
    path = save_checkpoint(m, tmp_path / "m.pt")
    back = load_checkpoint(path)
    x = _batch(3)
    np.testing.assert_array_equal(forward(m, x, 1), forward(back, x, 1))
    assert back.task_index == m.task_index
