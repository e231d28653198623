import copy

import pytest
import torch

from aikd.losses import kd_kl, soften
from aikd.metrics import evaluate
from aikd.models import (
    ClassifierSpec,
    CriticSpec,
    ModelTriple,
    build_classifier,
    build_critic,
    freeze,
    load_checkpoint,
    load_superior,
    parameter_checksum,
    save_checkpoint,
    snapshot_previous,
)

TINY = ClassifierSpec("tiny_cnn", 10, 32)


class TestClassifierSpec:
    def test_unknown_architecture(self):
        with pytest.raises(ValueError, match="unknown architecture"):
            ClassifierSpec("vgg16", 10, 32)

    def test_resolution_rules(self):
        with pytest.raises(ValueError, match="resolution"):
            ClassifierSpec("tiny_cnn", 10, 4)
        with pytest.raises(ValueError, match="resolution"):
            ClassifierSpec("resnet18", 10, 32)
        ClassifierSpec("preact_resnet18", 100, 32)  # canonical CIFAR shape
        ClassifierSpec("tiny_cnn", 2, 8)

    def test_class_count(self):
        with pytest.raises(ValueError, match="num_classes"):
            ClassifierSpec("tiny_cnn", 1, 32)


class TestBuildClassifier:
    def test_forward_shape(self):
        model = build_classifier(TINY, seed=0)
        logits = model(torch.randn(4, 3, 32, 32))
        assert logits.shape == (4, 10)

    def test_seed_determinism(self):
        a = build_classifier(TINY, seed=42)
        b = build_classifier(TINY, seed=42)
        assert parameter_checksum(a) == parameter_checksum(b)
        c = build_classifier(TINY, seed=43)
        assert parameter_checksum(a) != parameter_checksum(c)

    def test_resnet_head_width_follows_classes(self):
        model = build_classifier(ClassifierSpec("resnet18", 200, 224), seed=0)
        assert model.fc.out_features == 200

    def test_preact_variants_forward(self):
        model = build_classifier(ClassifierSpec("preact_resnet18", 100, 32), seed=0)
        assert model(torch.randn(2, 3, 32, 32)).shape == (2, 100)


class TestCritic:
    def test_score_shape(self):
        critic = build_critic(CriticSpec(input_dim=10), seed=0)
        critic.eval()
        assert critic(torch.randn(4, 10)).shape == (4,)

    def test_identical_rows_identical_scores_in_eval(self):
        critic = build_critic(CriticSpec(input_dim=8), seed=1)
        critic.eval()
        row = torch.randn(1, 8)
        batch = torch.cat([row, torch.randn(2, 8), row])
        scores = critic(batch)
        assert torch.equal(scores[0], scores[3])

    @pytest.mark.parametrize("c", [10, 100])
    def test_parameter_count_formula(self, c):
        spec = CriticSpec(input_dim=c)
        critic = build_critic(spec, seed=0)
        actual = sum(p.numel() for p in critic.parameters() if p.requires_grad)
        expected = c * 64 + 64 + 2 * 64 + 64 * 32 + 32 + 32 * 1 + 1
        assert actual == expected == spec.parameter_count()

    def test_layer_widths(self):
        critic = build_critic(CriticSpec(input_dim=100), seed=0)
        assert tuple(critic.fc1.weight.shape) == (64, 100)
        assert tuple(critic.fc2.weight.shape) == (32, 64)
        assert tuple(critic.proj.weight.shape) == (1, 32)

    def test_dimension_mismatch_at_call(self):
        critic = build_critic(CriticSpec(input_dim=10), seed=0)
        with pytest.raises(ValueError, match="expects"):
            critic(torch.randn(4, 12))


class TestSnapshot:
    def test_copy_semantics(self):
        student = build_classifier(TINY, seed=0)
        triple = ModelTriple(student=student, superior=None, previous=None, spec=TINY)
        snapshot_previous(triple)
        student.eval()
        x = torch.randn(3, 3, 32, 32)
        assert torch.allclose(triple.previous(x), student(x))
        assert all(not p.requires_grad for p in triple.previous.parameters())

    def test_kl_zero_right_after_snapshot(self):
        student = build_classifier(TINY, seed=1)
        triple = ModelTriple(student=student, superior=None, previous=None, spec=TINY)
        snapshot_previous(triple)
        student.eval()
        x = torch.randn(4, 3, 32, 32)
        kl = kd_kl(soften(triple.previous(x), 1.0), soften(student(x), 1.0), 1.0)
        assert abs(float(kl.detach())) <= 1e-10

    def test_student_diverges_after_update(self):
        student = build_classifier(TINY, seed=2)
        triple = ModelTriple(student=student, superior=None, previous=None, spec=TINY)
        snapshot_previous(triple)
        before = parameter_checksum(triple.previous)
        opt = torch.optim.SGD(student.parameters(), lr=0.1)
        student.train()
        loss = student(torch.randn(4, 3, 32, 32)).pow(2).mean()
        loss.backward()
        opt.step()
        diffs = [
            (a - b).abs().max().item()
            for a, b in zip(student.parameters(), triple.previous.parameters())
        ]
        assert max(diffs) > 0
        assert parameter_checksum(triple.previous) == before


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build_classifier(TINY, seed=5)
        path = tmp_path / "ckpt"
        save_checkpoint(path, model, TINY, "digest123", epoch=7, val_accuracy=0.875)
        payload = load_checkpoint(path)
        assert payload["epoch"] == 7
        assert payload["config_digest"] == "digest123"
        assert payload["val_accuracy"] == 0.875
        for key, tensor in model.state_dict().items():
            assert torch.equal(payload["state_dict"][key], tensor)

    def test_load_superior_frozen_and_deterministic(self, tmp_path):
        model = build_classifier(TINY, seed=6)
        path = tmp_path / "ckpt"
        save_checkpoint(path, model, TINY, "d", epoch=1, val_accuracy=0.5)
        superior = load_superior(path, TINY)
        assert all(not p.requires_grad for p in superior.parameters())
        assert not superior.training
        x = torch.randn(2, 3, 32, 32)
        assert torch.equal(superior(x), superior(x))

    def test_load_superior_spec_mismatch(self, tmp_path):
        model = build_classifier(TINY, seed=6)
        path = tmp_path / "ckpt"
        save_checkpoint(path, model, TINY, "d", epoch=1, val_accuracy=0.5)
        wrong = ClassifierSpec("tiny_cnn", 12, 32)
        with pytest.raises(ValueError, match="does not match"):
            load_superior(path, wrong)

    def test_missing_and_corrupt_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope")
        bad = tmp_path / "bad"
        bad.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="cannot read"):
            load_checkpoint(bad)

    def test_manifest_accuracy_matches_recomputation(self, pretrained_run, synthetic_splits):
        ckpt, _ = pretrained_run
        _, val, _ = synthetic_splits
        payload = load_checkpoint(ckpt)
        superior = load_superior(ckpt, TINY)
        report, _ = evaluate(superior, val)
        recomputed = 1.0 - report.top1_error / 100.0
        assert abs(recomputed - payload["val_accuracy"]) <= 1e-6


class TestFreeze:
    def test_freeze_marks_eval_and_no_grad(self):
        model = build_classifier(TINY, seed=8)
        freeze(model)
        assert not model.training
        assert all(not p.requires_grad for p in model.parameters())
