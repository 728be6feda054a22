"""Tests for losses, batch gradients, the training loop and checkpoints."""

from __future__ import annotations

import csv
import struct
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.ndimage import binary_dilation

from uvdnerf.config import RunConfig
from uvdnerf.errors import CheckpointError, DatasetError, NumericalError, TopologyMismatchError
from uvdnerf.field import AdamState
from uvdnerf.mesh import ProxySequence, TriangleMesh, validate_sequence
from uvdnerf.metrics import expand_box, mask_bounding_box, psnr, ssim
from uvdnerf.render import RayBatch, generate_rays
from uvdnerf.synth import Dataset, SceneSpec, export_dataset, generate_scene, import_dataset
from uvdnerf.training import (
    EXPONENT_CLAMP,
    LOSS_COLUMNS,
    MAGIC,
    Checkpoint,
    LossComponents,
    LossWeights,
    Model,
    PixelSampler,
    RayBatchTarget,
    batch_loss,
    distance_loss,
    distance_loss_grad,
    evaluate_held_out,
    load_checkpoint,
    mask_loss,
    mask_loss_grad,
    offset_reg_loss,
    offset_reg_loss_grad,
    photometric_loss,
    photometric_loss_grad,
    save_checkpoint,
    total_loss,
    train,
)

from .helpers import finite_difference, relative_error


def assert_same_parameters(a: Model, b: Model) -> None:
    pa = a.field.parameters()
    pb = b.field.parameters()
    assert pa.keys() == pb.keys()
    for name in pa:
        np.testing.assert_array_equal(pa[name], pb[name], err_msg=name)


def read_rows(path: Path) -> list[dict[str, str]]:
    with path.open(newline="", encoding="utf-8") as fp:
        return list(csv.DictReader(fp))


def loss_table(log: list[dict[str, float]]) -> np.ndarray:
    return np.array([[row[column] for column in LOSS_COLUMNS] for row in log], dtype=np.float64)


@pytest.fixture
def trained(tiny_dataset: Dataset, tiny_run: RunConfig) -> Checkpoint:
    return train(tiny_dataset, replace(tiny_run, iterations=2)).checkpoint


class TestLosses:
    """Tests for the individual loss terms."""

    def test_photometric(self) -> None:
        assert photometric_loss(np.array([[0.3, 0.4, 0.0]]), np.zeros((1, 3))) == pytest.approx(0.5)
        pred = np.array([[0.3, 0.4, 0.0], [1.0, 1.0, 1.0]])
        target = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
        assert photometric_loss(pred, target) == pytest.approx(0.25)

    def test_photometric_rejects_mismatch(self) -> None:
        with pytest.raises(ValueError):
            photometric_loss(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_mask(self) -> None:
        assert mask_loss(np.array([0.7]), np.array([1.0])) == pytest.approx(0.3)
        assert mask_loss(np.array([0.7, 0.1]), np.array([1.0, 0.0])) == pytest.approx(0.2)

    def test_distance_inside_is_unweighted(self) -> None:
        assert distance_loss(np.array([2.0]), np.array([-1.0]), beta=5.0) == pytest.approx(2.0)

    def test_distance_outside_grows_exponentially(self) -> None:
        assert distance_loss(np.array([1.0]), np.array([0.1]), beta=10.0) == pytest.approx(np.e)

    def test_distance_exponent_clamped(self) -> None:
        value = distance_loss(np.array([1.0]), np.array([100.0]), beta=10.0)
        assert value == pytest.approx(np.exp(80.0))
        assert np.isfinite(value)

    def test_default_beta_stays_below_clamp(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        beta = Model.initialize(tiny_run, tiny_dataset.proxies).weights.beta
        reach = tiny_run.shell_factor * max(mesh.diagonal() for mesh in tiny_dataset.proxies.frames)
        assert reach * beta < EXPONENT_CLAMP
        d = np.linspace(-reach, reach, 7)
        expected = np.mean(np.exp(np.maximum(d, 0.0) * beta))
        assert distance_loss(np.ones(7), d, beta) == pytest.approx(expected, rel=1e-12)

    def test_distance_counts_culled_samples(self) -> None:
        assert distance_loss(np.array([2.0]), np.array([-1.0]), 1.0, count=4) == pytest.approx(0.5)

    def test_offset_regularizer(self) -> None:
        offsets = np.array([[0.03, 0.04, 0.0]])
        assert offset_reg_loss(offsets) == pytest.approx(0.05)
        assert offset_reg_loss(offsets, count=2) == pytest.approx(0.025)
        assert offset_reg_loss(np.zeros((0, 3)), count=0) == 0.0

    def test_total_and_phases(self) -> None:
        weights = LossWeights(lambda_mask=0.1, lambda_dist=0.01, lambda_dfm=0.01)
        parts = LossComponents(rgb=0.1, mask=0.2, dist=0.3, dfm=0.4)
        assert total_loss(parts, weights, 0).total == pytest.approx(0.127)
        assert total_loss(parts, weights, 399).phase == 1.0
        report = total_loss(parts, weights, 400)
        assert report.phase == 0.1
        assert report.total == pytest.approx(0.1027)

    def test_negative_weight_rejected(self) -> None:
        with pytest.raises(ValueError):
            LossWeights(lambda_dist=-1.0)

    def test_default_beta_follows_template(self) -> None:
        assert LossWeights.from_run_config(RunConfig(), 2.0).beta == pytest.approx(10.0)
        assert LossWeights.from_run_config(RunConfig(beta=3.0), 2.0).beta == 3.0

    def test_gradients_match_finite_differences(self) -> None:
        rng = np.random.default_rng(0)
        pred = rng.uniform(size=(5, 3))
        target = rng.uniform(size=(5, 3))
        grad = photometric_loss_grad(pred, target)
        numeric = finite_difference(lambda: photometric_loss(pred, target), pred, (2, 1), 1e-6)
        assert relative_error(float(grad[2, 1]), numeric) < 1e-6

        weight = rng.uniform(size=5)
        mask = (rng.uniform(size=5) > 0.5).astype(float)
        np.testing.assert_allclose(mask_loss_grad(weight, mask), (1.0 - 2.0 * mask) / 5)

        sigma = rng.uniform(size=6)
        d = rng.normal(scale=0.1, size=6)
        grad_sigma = distance_loss_grad(d, 4.0, count=10)
        numeric = finite_difference(lambda: distance_loss(sigma, d, 4.0, count=10), sigma, (3,), 1e-6)
        assert relative_error(float(grad_sigma[3]), numeric) < 1e-6

        offsets = rng.normal(scale=0.02, size=(4, 3))
        grad_off = offset_reg_loss_grad(offsets, count=8)
        numeric = finite_difference(lambda: offset_reg_loss(offsets, count=8), offsets, (1, 2), 1e-8)
        assert relative_error(float(grad_off[1, 2]), numeric) < 1e-5

    def test_gradients_vanish_at_zero(self) -> None:
        assert not photometric_loss_grad(np.ones((2, 3)), np.ones((2, 3))).any()
        assert not offset_reg_loss_grad(np.zeros((3, 3))).any()


class TestBatchGradients:
    """End-to-end check of the hand-written backward pass."""

    def test_matches_finite_differences(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        run = replace(tiny_run, n_samples=4, hidden_activation="softplus", table_init_scale=0.1)
        model = Model.initialize(run, tiny_dataset.proxies)
        rng = np.random.default_rng(1)
        last = model.field.offset_mlp
        last.weights[-1][...] = rng.normal(0.0, 0.3, size=last.weights[-1].shape)
        last.biases[-1][...] = rng.normal(0.0, 0.3, size=last.biases[-1].shape)

        pixels = np.array([[12, 12], [10, 13], [14, 11]])
        rays = generate_rays(tiny_dataset.camera(0), pixels)
        image = tiny_dataset.load_image(0, 1)
        mask = tiny_dataset.load_mask(0, 1).astype(np.float64)
        target = RayBatchTarget(image[pixels[:, 1], pixels[:, 0]], mask[pixels[:, 1], pixels[:, 0]], 1)

        def loss() -> float:
            return batch_loss(model, rays, target, 0, backward=False).report.total

        model.field.zero_grad()
        result = batch_loss(model, rays, target, 0)
        assert result.hit.all()
        for name, value, grad in model.field.named_parameters():
            index = np.unravel_index(np.argmax(np.abs(grad)), value.shape)
            assert grad[index] != 0.0, name
            numeric = finite_difference(loss, value, index, 1e-6)
            assert relative_error(float(grad[index]), numeric) < 1e-4, name

    def test_culled_rays_render_black(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        model = Model.initialize(tiny_run, tiny_dataset.proxies)
        toward = generate_rays(tiny_dataset.camera(0), np.array([[12, 12], [12, 12]]))
        directions = toward.directions.copy()
        directions[0] *= -1.0
        rays = RayBatch(toward.origins, directions, toward.pixels, toward.near, toward.far)
        target = RayBatchTarget(np.zeros((2, 3)), np.zeros(2), 0)
        result = batch_loss(model, rays, target, 0, backward=False)
        assert not result.hit[0] and result.hit[1]
        assert not result.color[0].any() and result.weight[0] == 0.0


class TestModel:
    """Tests for model construction and proxy replacement."""

    def test_identity_replacement_renders_identically(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        model = Model.initialize(tiny_run, tiny_dataset.proxies)
        cam = tiny_dataset.camera(1)
        image, weight = model.render(cam, 1)
        again, weight_again = model.with_proxies(tiny_dataset.proxies).render(cam, 1)
        np.testing.assert_array_equal(again, image)
        np.testing.assert_array_equal(weight_again, weight)

    def test_replacement_needs_same_frame_count(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        model = Model.initialize(tiny_run, tiny_dataset.proxies)
        with pytest.raises(DatasetError):
            model.with_proxies(validate_sequence([tiny_dataset.proxies[0]]))

    def test_replacement_needs_same_topology(
        self, tiny_dataset: Dataset, tiny_run: RunConfig, cube: TriangleMesh
    ) -> None:
        model = Model.initialize(tiny_run, tiny_dataset.proxies)
        with pytest.raises(TopologyMismatchError):
            model.with_proxies(validate_sequence([cube, cube]))

    def test_xyzd_mode(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        model = Model.initialize(replace(tiny_run, coord_mode="xyzd"), tiny_dataset.proxies)
        assert model.mapper.dim == 4
        assert model.field.cfg.dim == 4
        image, _ = model.render(tiny_dataset.camera(0), 0)
        assert np.isfinite(image).all()


class TestPixelSampler:
    """Tests for training-pixel selection."""

    def test_exterior_fraction(self) -> None:
        mask = np.zeros((20, 20), dtype=bool)
        mask[8:12, 8:12] = True
        sampler = PixelSampler(np.zeros((20, 20, 3)), mask, dilation=1, exterior_fraction=0.25)
        pixels = sampler.sample(100, np.random.default_rng(2))
        inside = binary_dilation(mask, iterations=1)[pixels[:, 1], pixels[:, 0]]
        assert pixels.shape == (100, 2)
        assert np.count_nonzero(~inside) == 25

    def test_empty_mask_samples_everywhere(self) -> None:
        sampler = PixelSampler(np.zeros((5, 5, 3)), np.zeros((5, 5), dtype=bool), dilation=2, exterior_fraction=0.2)
        assert sampler.sample(10, np.random.default_rng(3)).shape == (10, 2)

    def test_target_reads_pixels(self) -> None:
        image = np.arange(2 * 3 * 3, dtype=float).reshape(2, 3, 3) / 20.0
        mask = np.array([[0, 1, 0], [1, 0, 0]], dtype=bool)
        target = PixelSampler(image, mask, 0, 0.0).target(np.array([[1, 0], [0, 1]]), 2)
        np.testing.assert_array_equal(target.colors, [image[0, 1], image[1, 0]])
        np.testing.assert_array_equal(target.mask, [1.0, 1.0])
        assert target.frame == 2


class TestTrain:
    """Tests for the optimization loop."""

    def test_zero_iterations_is_initialization(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        result = train(tiny_dataset, replace(tiny_run, iterations=0))
        assert result.checkpoint.iteration == 0
        assert result.loss_log == []
        assert_same_parameters(result.checkpoint.model, Model.initialize(tiny_run, tiny_dataset.proxies))

    def test_deterministic(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        a = train(tiny_dataset, tiny_run)
        b = train(tiny_dataset, tiny_run)
        assert a.loss_log == b.loss_log
        assert_same_parameters(a.checkpoint.model, b.checkpoint.model)

    def test_parameters_change(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        result = train(tiny_dataset, tiny_run)
        fresh = Model.initialize(tiny_run, tiny_dataset.proxies)
        assert not np.array_equal(
            result.checkpoint.model.field.radiance_tables.params, fresh.field.radiance_tables.params
        )
        assert result.checkpoint.adam.step == tiny_run.iterations

    def test_logs_written(self, tiny_dataset: Dataset, tiny_run: RunConfig, tmp_path: Path) -> None:
        result = train(tiny_dataset, tiny_run, out_dir=tmp_path)
        rows = read_rows(tmp_path / "loss_log.csv")
        assert tuple(rows[0].keys()) == LOSS_COLUMNS
        assert [int(row["iter"]) for row in rows] == [0, 1, 2]
        assert float(rows[0]["lr"]) == pytest.approx(tiny_run.lr_start)
        evals = read_rows(tmp_path / "eval_log.csv")
        # Evaluations after iterations 1 and 2, one held-out camera each.
        assert [int(row["iter"]) for row in evals] == [1, 2]
        assert len(result.eval_log) == 2
        assert RunConfig.from_file(tmp_path / "run_config.txt") == tiny_run

    def test_regularizers_logged(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        log = train(tiny_dataset, tiny_run).loss_log
        assert log[0]["l_dfm"] == 0.0
        assert all(row["l_dist"] > 0.0 for row in log)

    def test_non_finite_loss(self, tiny_dataset: Dataset, tiny_run: RunConfig, tmp_path: Path) -> None:
        model = Model.initialize(tiny_run, tiny_dataset.proxies)
        model.field.radiance_tables.params[...] = np.nan
        resume = Checkpoint(model, AdamState())
        with pytest.raises(NumericalError) as excinfo:
            train(tiny_dataset, tiny_run, out_dir=tmp_path, resume=resume)
        assert "iteration 0" in str(excinfo.value)
        assert (tmp_path / "diagnostic.npz").exists()
        with np.load(tmp_path / "diagnostic.npz") as dump:
            assert {"pixels", "cam", "losses"} <= set(dump.files)

    def test_no_training_cameras(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        with pytest.raises(DatasetError):
            train(replace(tiny_dataset, train_cams=[]), tiny_run)

    def test_auto_matches_dense_over_fifty_iterations(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        fitting = replace(tiny_run, hash_n_max=8, iterations=50, eval_every=50)
        auto = train(tiny_dataset, fitting)
        dense = train(tiny_dataset, replace(fitting, hash_indexing="dense"))
        assert len(auto.loss_log) == 50
        np.testing.assert_allclose(loss_table(auto.loss_log), loss_table(dense.loss_log), rtol=0.0, atol=1e-10)
        pa = auto.checkpoint.model.field.parameters()
        pd = dense.checkpoint.model.field.parameters()
        for name in pa:
            np.testing.assert_allclose(pa[name], pd[name], rtol=0.0, atol=1e-10, err_msg=name)

    def test_without_offsets(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        run = replace(tiny_run, iterations=12, eval_every=12)
        full = train(tiny_dataset, run).loss_log
        bare = train(tiny_dataset, replace(run, use_offset=False)).loss_log
        assert np.isfinite(loss_table(full)).all()
        assert np.isfinite(loss_table(bare)).all()
        assert all(row["l_dfm"] == 0.0 for row in bare)
        assert any(row["l_dfm"] > 0.0 for row in full[1:])
        assert not np.array_equal(loss_table(full), loss_table(bare))

    def test_xyzd_and_uvd_on_stretching_sequence(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        template, last = tiny_dataset.proxies.frames[0], tiny_dataset.proxies.frames[-1]
        extent = np.ptp(last.vertices, axis=0) / np.ptp(template.vertices, axis=0)
        assert extent.max() - extent.min() > 0.05
        run = replace(tiny_run, iterations=12, eval_every=12)
        uvd = train(tiny_dataset, run).loss_log
        xyzd = train(tiny_dataset, replace(run, coord_mode="xyzd")).loss_log
        assert np.isfinite(loss_table(uvd)).all()
        assert np.isfinite(loss_table(xyzd)).all()
        assert not np.array_equal(loss_table(uvd), loss_table(xyzd))

    def test_held_out_scores(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        model = Model.initialize(tiny_run, tiny_dataset.proxies)
        scores = evaluate_held_out(model, tiny_dataset, 1)
        assert [cam for cam, _ in scores] == tiny_dataset.eval_cams
        assert all(np.isfinite(score) for _, score in scores)

    @pytest.mark.slow
    def test_training_improves_held_out_psnr(self, tiny_dataset: Dataset, tiny_run: RunConfig) -> None:
        run = replace(tiny_run, iterations=300, batch_rays=256, n_samples=24, eval_every=300, mlp_width=16)
        before = evaluate_held_out(Model.initialize(run, tiny_dataset.proxies), tiny_dataset, 0)
        after = train(tiny_dataset, run).checkpoint.model
        improved = evaluate_held_out(after, tiny_dataset, 0)
        assert improved[0][1] > before[0][1] + 3.0

    @pytest.mark.slow
    def test_default_scene_quality(self, tmp_path: Path) -> None:
        export_dataset(generate_scene(SceneSpec(), seed=0), tmp_path / "data")
        dataset = import_dataset(tmp_path / "data")
        model = train(dataset, RunConfig(iterations=2000)).checkpoint.model
        psnrs, ssims = [], []
        for cam_id in dataset.eval_cams:
            for frame in range(dataset.frame_count):
                image, _ = model.render(dataset.camera(cam_id), frame)
                truth = dataset.load_image(cam_id, frame)
                tight = mask_bounding_box(dataset.load_mask(cam_id, frame))
                box = expand_box(tight or (0, truth.shape[0], 0, truth.shape[1]), truth.shape)
                psnrs.append(psnr(image, truth, box))
                ssims.append(ssim(image, truth, box))
        assert np.mean(psnrs) >= 28.0
        assert np.mean(ssims) >= 0.90


class TestCheckpoint:
    """Tests for the binary checkpoint format."""

    def test_save_and_load(self, trained: Checkpoint, tmp_path: Path) -> None:
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, trained)
        loaded = load_checkpoint(path)
        assert path.read_bytes().startswith(MAGIC)
        assert loaded.iteration == trained.iteration == 2
        assert loaded.model.run == trained.model.run
        assert loaded.model.weights == trained.model.weights
        assert loaded.adam.step == trained.adam.step
        assert_same_parameters(loaded.model, trained.model)
        for name, moment in trained.adam.m.items():
            np.testing.assert_array_equal(loaded.adam.m[name], moment)
            np.testing.assert_array_equal(loaded.adam.v[name], trained.adam.v[name])

    def test_loaded_model_renders_identically(self, trained: Checkpoint, tiny_dataset: Dataset, tmp_path: Path) -> None:
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, trained)
        cam = tiny_dataset.camera(1)
        expected, _ = trained.model.render(cam, 0)
        got, _ = load_checkpoint(path).model.render(cam, 0)
        np.testing.assert_array_equal(got, expected)

    def test_resume_continues_iterations(
        self, trained: Checkpoint, tiny_dataset: Dataset, tiny_run: RunConfig, tmp_path: Path
    ) -> None:
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, trained)
        result = train(tiny_dataset, replace(tiny_run, iterations=4), resume=load_checkpoint(path))
        assert [row["iter"] for row in result.loss_log] == [2, 3]
        assert result.checkpoint.adam.step == 4

    def test_truncated(self, trained: Checkpoint, tmp_path: Path) -> None:
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, trained)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        path.write_bytes(MAGIC[:4])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path: Path) -> None:
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"NOT-A-CKPT" + bytes(32))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_unsupported_version(self, trained: Checkpoint, tmp_path: Path) -> None:
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, trained)
        data = bytearray(path.read_bytes())
        data[len(MAGIC) : len(MAGIC) + 4] = struct.pack("<I", 2)
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version 2"):
            load_checkpoint(path)

    def test_corrupt_payload(self, trained: Checkpoint, tmp_path: Path) -> None:
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, trained)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_replacement_proxies_must_share_faces(
        self, trained: Checkpoint, cube: TriangleMesh, tmp_path: Path
    ) -> None:
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, trained)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, validate_sequence([cube, cube]))

    def test_replacement_proxies_accepted(self, trained: Checkpoint, tmp_path: Path) -> None:
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, trained)
        frames = trained.model.mapper.sequence.frames
        moved: ProxySequence = validate_sequence([mesh.with_vertices(mesh.vertices * 1.1) for mesh in frames])
        loaded = load_checkpoint(path, moved)
        np.testing.assert_array_equal(loaded.model.mapper.sequence[0].vertices, moved[0].vertices)
