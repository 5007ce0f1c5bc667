import json
import os
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from embed_extract.encoders import EncoderUnavailable, ProjectionEncoder, resolve_encoder
from embed_extract.extract import ExtractJob, extract


def make_toy_image_tree(root, classes=("cat", "dog"), per_class=3, size=24):
    rng = np.random.Generator(np.random.PCG64(7))
    for c, name in enumerate(classes):
        class_dir = root / name
        class_dir.mkdir(parents=True)
        for i in range(per_class):
            # class-dependent base color plus texture so features differ
            base = np.zeros((size, size, 3), dtype=np.uint8)
            base[..., c % 3] = 150 + 20 * c
            noise = rng.integers(0, 80, size=(size, size, 3), dtype=np.uint8)
            Image.fromarray(base + noise // 2).save(class_dir / f"img_{i}.png")
    return root


@pytest.fixture
def toy_tree(tmp_path):
    return make_toy_image_tree(tmp_path / "images")


class TestEncoders:
    def test_projection_encoder_shapes_and_norms(self, toy_tree):
        enc = ProjectionEncoder("proj-32", 32)
        images = [Image.open(p) for p in sorted((toy_tree / "cat").iterdir())]
        feats = enc.encode_images(images)
        assert feats.shape == (3, 32)
        np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-5)
        texts = enc.encode_texts(["a photo of a cat", "a photo of a dog"])
        assert texts.shape == (2, 32)
        np.testing.assert_allclose(np.linalg.norm(texts, axis=1), 1.0, atol=1e-5)

    def test_encoder_is_deterministic(self, toy_tree):
        images = [Image.open(p) for p in sorted((toy_tree / "dog").iterdir())]
        a = resolve_encoder("proj-64").encode_images(images)
        b = resolve_encoder("proj-64").encode_images(images)
        assert np.array_equal(a, b)

    def test_unknown_encoder_rejected(self):
        with pytest.raises(EncoderUnavailable):
            resolve_encoder("magic-encoder")
        with pytest.raises(EncoderUnavailable):
            resolve_encoder("proj-one")


class TestExtract:
    def test_counts_and_sorted_class_order(self, toy_tree, tmp_path):
        job = ExtractJob(root=str(toy_tree), out_prefix=str(tmp_path / "out"))
        result = extract(job)
        assert result.class_names == ["cat", "dog"]  # sorted directory order
        assert result.num_samples == 6
        manifest = json.loads((tmp_path / "out.manifest.json").read_text())
        assert manifest["counts"] == {"cat": 3, "dog": 3}
        assert manifest["skipped"] == []

    def test_unreadable_image_is_skipped_with_manifest_entry(self, toy_tree, tmp_path):
        (toy_tree / "cat" / "broken.png").write_bytes(b"not an image at all")
        job = ExtractJob(root=str(toy_tree), out_prefix=str(tmp_path / "out"))
        result = extract(job)
        assert result.num_samples == 6
        assert len(result.skipped) == 1
        assert "broken.png" in result.skipped[0]["path"]

    def test_empty_class_is_hard_error(self, toy_tree, tmp_path):
        (toy_tree / "empty_class").mkdir()
        job = ExtractJob(root=str(toy_tree), out_prefix=str(tmp_path / "out"))
        with pytest.raises(ValueError, match="no readable images"):
            extract(job)

    def test_deterministic_output_bytes(self, toy_tree, tmp_path):
        job_a = ExtractJob(root=str(toy_tree), out_prefix=str(tmp_path / "a"))
        job_b = ExtractJob(root=str(toy_tree), out_prefix=str(tmp_path / "b"))
        extract(job_a)
        extract(job_b)
        assert (tmp_path / "a.features.cff").read_bytes() == (tmp_path / "b.features.cff").read_bytes()
        assert (tmp_path / "a.text.cff").read_bytes() == (tmp_path / "b.text.cff").read_bytes()

    def test_template_must_hold_placeholder(self, toy_tree, tmp_path):
        with pytest.raises(ValueError):
            ExtractJob(root=str(toy_tree), out_prefix=str(tmp_path / "x"), template="no class here")


class TestCrossComponentRoundTrip:
    """The emitted files must be valid inputs for the training artifact."""

    def test_read_back_through_consumer_parser(self, toy_tree, tmp_path):
        from cachefed.features import read_features, read_text_head

        extract(ExtractJob(root=str(toy_tree), out_prefix=str(tmp_path / "out")))
        dataset, catalog = read_features(tmp_path / "out.features.cff")
        assert catalog.class_names == ("cat", "dog")
        assert len(dataset) == 6
        norms = np.linalg.norm(dataset.features, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-5
        head, head_catalog = read_text_head(tmp_path / "out.text.cff")
        assert head_catalog.class_names == ("cat", "dog")
        assert head.num_classes == 2

    def test_trains_end_to_end_for_five_rounds(self, toy_tree, tmp_path):
        extract(ExtractJob(root=str(toy_tree), out_prefix=str(tmp_path / "out")))
        prefix = tmp_path / "out"
        result = subprocess.run(
            [
                sys.executable, "-m", "cachefed", "train",
                "--train", f"{prefix}.features.cff",
                "--test", f"{prefix}.features.cff",
                "--synthetic", f"{prefix}.features.cff",
                "--text-head", f"{prefix}.text.cff",
                "--clients", "2",
                "--rounds", "5",
                "--seed", "1",
                "--out-dir", str(tmp_path / "run"),
            ],
            capture_output=True,
            text=True,
            env=dict(os.environ, CACHEFED_THREADS="0"),
        )
        assert result.returncode == 0, result.stderr
        rounds = (tmp_path / "run" / "rounds.csv").read_text().strip().split("\n")
        assert len(rounds) == 1 + 1 + 5  # header, round 0, five rounds
        print("ACCEPTANCE PASS: extractor output parses, is unit-norm, and trains 5 rounds")


class TestCli:
    def test_cli_end_to_end(self, toy_tree, tmp_path):
        result = subprocess.run(
            [
                sys.executable, "-m", "embed_extract",
                "--root", str(toy_tree),
                "--out", str(tmp_path / "cli_out"),
            ],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 0, result.stderr
        assert (tmp_path / "cli_out.features.cff").exists()
        assert (tmp_path / "cli_out.text.cff").exists()
        assert (tmp_path / "cli_out.manifest.json").exists()

    def test_cli_missing_root(self, tmp_path):
        result = subprocess.run(
            [
                sys.executable, "-m", "embed_extract",
                "--root", str(tmp_path / "nope"),
                "--out", str(tmp_path / "x"),
            ],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 3

    def test_hf_encoder_unavailable_offline(self, toy_tree, tmp_path):
        result = subprocess.run(
            [
                sys.executable, "-m", "embed_extract",
                "--root", str(toy_tree),
                "--encoder", "hf:openai/clip-vit-base-patch32",
                "--out", str(tmp_path / "x"),
            ],
            capture_output=True,
            text=True,
            env=dict(os.environ, HF_HUB_OFFLINE="1", TRANSFORMERS_OFFLINE="1"),
        )
        if result.returncode == 0:
            pytest.skip("CLIP weights available in this environment")
        assert result.returncode == 2
        assert "could not load weights" in result.stderr or "not installed" in result.stderr
