"""Tests for the cosine head, expert branches, consensus, and checkpoints."""

import json

import numpy as np
import pytest
import torch

from remex.losses import LossWeights, total_loss
from remex.model import (
    CosineHead,
    MultiExpertModel,
    SmallBackbone,
    cosine_logits,
    load_checkpoint,
    save_checkpoint,
)


class TestCosineHead:
    def test_parallel_vector_scores_scale(self):
        w = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        e = torch.tensor([[2.0, 0.0]], dtype=torch.float64)
        z = cosine_logits(e, w, scale=16.0)
        assert float(z[0, 0]) == pytest.approx(16.0, abs=1e-9)
        assert float(z[0, 1]) == pytest.approx(0.0, abs=1e-9)

    def test_positive_rescaling_leaves_logits(self):
        torch.manual_seed(0)
        w = torch.randn(5, 8, dtype=torch.float64)
        e = torch.randn(3, 8, dtype=torch.float64)
        base = cosine_logits(e, w)
        for factor in (1e-6, 0.5, 3.0, 1e6):
            assert torch.allclose(cosine_logits(e * factor, w), base, atol=1e-9)

    def test_logits_bounded_by_scale(self):
        torch.manual_seed(1)
        for _ in range(20):
            w = torch.randn(6, 4, dtype=torch.float64) * 10
            e = torch.randn(8, 4, dtype=torch.float64) * 10
            z = cosine_logits(e, w, scale=16.0)
            assert bool((z.abs() <= 16.0 + 1e-9).all())

    def test_argmax_invariant_under_rescaling(self):
        torch.manual_seed(2)
        w = torch.randn(7, 5)
        e = torch.randn(10, 5)
        base = cosine_logits(e, w).argmax(dim=1)
        scaled = cosine_logits(e * 123.0, w).argmax(dim=1)
        assert torch.equal(base, scaled)

    def test_zero_embedding_is_safe(self):
        w = torch.randn(3, 4)
        z = cosine_logits(torch.zeros(1, 4), w)
        assert torch.isfinite(z).all()

    def test_module_rejects_dim_mismatch(self):
        head = CosineHead(8, 3)
        with pytest.raises(ValueError):
            head(torch.randn(2, 4))


class TestSmallBackbone:
    def test_output_dim_and_shape(self):
        torch.manual_seed(3)
        net = SmallBackbone(in_channels=1)
        out = net(torch.randn(2, 1, 64, 64))
        assert out.shape == (2, 256)
        assert net.out_dim == 256

    def test_attention_placement_configurable(self):
        none = SmallBackbone(attention="none")
        assert len(none.attns) == 0
        all_stages = SmallBackbone(attention="channel", attn_stages=(0, 1, 2, 3))
        assert sorted(all_stages.attns) == ["0", "1", "2", "3"]

    def test_rejects_bad_stage_index(self):
        with pytest.raises(ValueError):
            SmallBackbone(attn_stages=(5,))


class TestMultiExpertModel:
    def make(self, branches=2, seed=4):
        torch.manual_seed(seed)
        return MultiExpertModel(num_classes=5, num_branches=branches)

    def test_forward_returns_one_pair_per_branch(self):
        model = self.make(branches=1)
        out = model(torch.randn(3, 1, 64, 64))
        assert len(out) == 1
        emb, logits = out[0]
        assert emb.shape == (3, 256) and logits.shape == (3, 5)

    def test_branches_have_independent_parameters(self):
        model = self.make(branches=2)
        w0 = model.branches[0].head.weight
        w1 = model.branches[1].head.weight
        assert not torch.equal(w0, w1)

    def test_identical_branches_produce_identical_outputs(self):
        model = self.make(branches=2)
        model.branches[1].load_state_dict(model.branches[0].state_dict())
        model.eval()
        x = torch.randn(2, 1, 64, 64)
        (e0, z0), (e1, z1) = model(x)
        assert torch.equal(e0, e1) and torch.equal(z0, z1)

    def test_forward_deterministic(self):
        model = self.make()
        model.eval()
        x = torch.randn(2, 1, 64, 64)
        out1 = model(x)
        out2 = model(x)
        assert all(torch.equal(a[1], b[1]) for a, b in zip(out1, out2))

    def test_logits_bounded_by_scale(self):
        model = self.make()
        model.eval()
        x = torch.randn(4, 1, 64, 64)
        for _, logits in model(x):
            assert bool((logits.abs() <= 16.0 + 1e-5).all())

    def test_gradient_independence_without_distillation(self):
        # with alpha=0 the objective separates per branch: branch 1's grads
        # from the joint loss equal those from its own terms alone
        model = self.make(branches=2)
        x = torch.randn(6, 1, 64, 64)
        y = torch.randint(0, 5, (6,))
        counts = [10, 5, 3, 2, 1]
        weights = LossWeights(alpha=0.0)

        outputs = model(x)
        joint = total_loss([z for _, z in outputs], [e for e, _ in outputs],
                           y, counts, weights, 2).total
        grads_joint = torch.autograd.grad(joint, list(model.branches[1].parameters()),
                                          allow_unused=True)

        outputs = model(x)
        solo = total_loss([outputs[1][1]], [outputs[1][0]], y, counts, weights, 2).total
        grads_solo = torch.autograd.grad(solo / 2.0, list(model.branches[1].parameters()),
                                         allow_unused=True)
        for gj, gs in zip(grads_joint, grads_solo):
            assert torch.allclose(gj, gs, atol=1e-6)

    def test_predict_single_branch_equals_softmax_argmax(self):
        model = self.make(branches=1)
        model.eval()
        x = torch.randn(4, 1, 64, 64)
        preds, consensus = model.predict(x)
        _, logits = model(x)[0]
        assert torch.allclose(consensus, torch.softmax(logits, dim=1), atol=1e-7)
        assert torch.equal(preds, torch.softmax(logits, dim=1).argmax(dim=1))

    def test_consensus_is_mean_of_softmaxes(self):
        # frozen oracle: mean of [0.6, 0.4] and [0.2, 0.8] is [0.4, 0.6]
        probs = torch.stack([torch.tensor([[0.6, 0.4]]), torch.tensor([[0.2, 0.8]])])
        consensus = probs.mean(dim=0)
        assert torch.allclose(consensus, torch.tensor([[0.4, 0.6]]))
        assert int(consensus.argmax(dim=1)) == 1

    def test_predict_tie_goes_to_lower_class_id(self):
        consensus = torch.tensor([[0.5, 0.5]])
        assert int(consensus.argmax(dim=1)) == 0

    def test_validation(self):
        with pytest.raises(ValueError):
            MultiExpertModel(num_classes=5, num_branches=0)
        with pytest.raises(ValueError):
            MultiExpertModel(num_classes=1)
        with pytest.raises(ValueError):
            MultiExpertModel(num_classes=3, backbone="nope")


class TestCheckpoint:
    def test_round_trip_preserves_outputs(self, tmp_path):
        torch.manual_seed(7)
        model = MultiExpertModel(num_classes=4, num_branches=2)
        model.eval()
        x = torch.randn(2, 1, 64, 64)
        before = model.predict(x)
        save_checkpoint(model, tmp_path / "ckpt", [7, 3, 2, 1], "deadbeef", epoch=9)
        loaded, meta = load_checkpoint(tmp_path / "ckpt")
        after = loaded.predict(x)
        assert torch.equal(before[0], after[0])
        assert torch.allclose(before[1], after[1])

    def test_meta_contents(self, tmp_path):
        torch.manual_seed(8)
        model = MultiExpertModel(num_classes=4, num_branches=3)
        save_checkpoint(model, tmp_path / "c", [4, 3, 2, 1], "cafe", epoch=5)
        meta = json.loads((tmp_path / "c" / "meta.json").read_text())
        assert meta["K"] == 3 and meta["C"] == 4 and meta["D"] == 256
        assert meta["class_counts"] == [4, 3, 2, 1]
        assert meta["config_hash"] == "cafe" and meta["epoch"] == 5
        assert sorted(p.name for p in (tmp_path / "c").glob("branch_*.pt")) == \
            ["branch_0.pt", "branch_1.pt", "branch_2.pt"]

    def test_blob_is_flat_key_to_tensor_layout(self, tmp_path):
        torch.manual_seed(9)
        model = MultiExpertModel(num_classes=3, num_branches=1)
        save_checkpoint(model, tmp_path / "c", [1, 1, 1])
        blob = torch.load(tmp_path / "c" / "branch_0.pt", weights_only=True)
        assert isinstance(blob, dict)
        assert all(isinstance(k, str) and torch.is_tensor(v) for k, v in blob.items())


class TestInputValidation:
    def test_forward_rejects_wrong_shape(self):
        torch.manual_seed(10)
        model = MultiExpertModel(num_classes=3, num_branches=1)
        with pytest.raises(ValueError, match="image batch"):
            model(torch.randn(2, 3, 64, 64))
        with pytest.raises(ValueError, match="image batch"):
            model(torch.randn(2, 64, 64))
