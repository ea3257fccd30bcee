import math
import struct
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings
from PIL import Image

from .augment import Augmenter, center_crop, horizontal_flip, random_crop, rescale_image, rotate, sample_rng
from .cascade.boxes import (
    MIN,
    UNION,
    BoundingBox,
    Detection,
    Stage,
    apply_bbox_regression,
    iou,
    map_pnet_cell,
    nms,
    square_pad,
)
from .cascade.chips import chip_name, extract_face_chip, format_detection, parse_detection
from .cascade.graph import detect_faces
from .cascade.networks import detector_specs, init_detector, load_detector
from .cascade.nodes.output import onet_stage
from .cascade.nodes.propose import build_pyramid, pnet_stage
from .cascade.nodes.refine import rnet_stage
from .config import PipelineConfig, dump_config, parse_config, resolve_config
from .dataset import TRAIN, VAL, DatasetManifest, Sample, dumps_manifest, ingest, loads_manifest, split
from .evaluation import (
    ClassReport,
    classification_report,
    confusion,
    evaluate,
    exact_accuracy,
    normalize,
    one_off_accuracy,
    render_report,
)
from .exceptions import (
    ConfigError,
    DimensionMismatchError,
    EmptyDatasetError,
    InvalidBoxError,
    MagicMismatchError,
    MissingArtifactError,
    ModelNotLoadedError,
    NumericError,
    ShapeError,
    TruncatedFileError,
    UnknownLayerError,
    VersionMismatchError,
)
from .imaging import ZERO, crop_and_resize
from .inference import FIVE_CROP_OFFSETS, average_crops, dumps_predictions, five_crop, predict, predict_batch
from .management.commands.predict import Command as PredictCommand
from .network import (
    AGE_LABELS,
    AgeClass,
    build_backbone,
    build_head,
    build_model,
    compose,
    dumps_spec,
    forward,
    init_weights,
    loads_spec,
)
from .tensor_ops import as_tensor, conv2d, dropout, dropout_mask, maxpool2d, relu, softmax
from .training import (
    AdamState,
    HeadTrainer,
    TrainConfig,
    adam_step,
    backward_head,
    cross_entropy,
    draw_dropout_masks,
    head_loss_and_grads,
    softmax_ce_grad,
    train,
    train_on_features,
)
from .weights import decode_weights, encode_weights, load_weights, save_weights


def naive_conv(x, w, b, stride, pad):
    xp = np.pad(x.astype(np.float64), ((pad, pad), (pad, pad), (0, 0)))
    k, cout = w.shape[0], w.shape[3]
    oh = (xp.shape[0] - k) // stride + 1
    ow = (xp.shape[1] - k) // stride + 1
    out = np.zeros((oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            patch = xp[i * stride:i * stride + k, j * stride:j * stride + k, :]
            for o in range(cout):
                out[i, j, o] = np.sum(patch * w[:, :, :, o]) + b[o]
    return out


def naive_maxpool(x, support, stride):
    oh = (x.shape[0] - support) // stride + 1
    ow = (x.shape[1] - support) // stride + 1
    out = np.zeros((oh, ow, x.shape[2]), dtype=x.dtype)
    for i in range(oh):
        for j in range(ow):
            for c in range(x.shape[2]):
                out[i, j, c] = x[i * stride:i * stride + support, j * stride:j * stride + support, c].max()
    return out


def brute_force_nms(boxes, threshold, mode):
    remaining = sorted(boxes, key=BoundingBox.sort_key)
    keep = []
    while remaining:
        best = remaining.pop(0)
        keep.append(best)
        remaining = [b for b in remaining if iou(best, b, mode) <= threshold]
    return keep


def write_png(path, pixels):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), "RGB").save(path)


def make_class_tree(root, per_class=2, size=20, seed=0):
    """One directory per age range holding `per_class` small random images."""
    rng = np.random.default_rng(seed)
    paths = []
    for label in AGE_LABELS:
        for i in range(per_class):
            path = Path(root) / label / f"img{i}.png"
            write_png(path, rng.integers(0, 256, (size, size, 3)))
            paths.append(path)
    return paths


class StubPNet:
    """Scores one cell per level; every other cell is background."""

    def __init__(self, scores, offsets=None):
        self.scores = np.asarray(scores, dtype=np.float32)
        self.offsets = np.zeros(self.scores.shape + (4,), np.float32) if offsets is None else np.asarray(offsets)
        self.calls = 0

    def __call__(self, image):
        self.calls += 1
        return self.scores, self.offsets


class StubRNet:
    def __init__(self, score=0.9):
        self.score = score

    def __call__(self, crops):
        n = len(crops)
        return np.full(n, self.score, np.float32), np.zeros((n, 4), np.float32)


class StubONet:
    def __init__(self, score=0.9, landmark=0.5):
        self.score = score
        self.landmark = landmark

    def __call__(self, crops):
        n = len(crops)
        return (np.full(n, self.score, np.float32), np.zeros((n, 4), np.float32),
                np.full((n, 10), self.landmark, np.float32))


class StubNets:
    def __init__(self, pnet=None, rnet=None, onet=None):
        self.pnet = pnet or StubPNet([[0.9]])
        self.rnet = rnet or StubRNet()
        self.onet = onet or StubONet()


class TensorOpsTests(SimpleTestCase):
    def test_conv2d_matches_nested_loop_reference(self):
        """Test conv2d against a naive reference on 100 random shapes"""
        rng = np.random.default_rng(7)
        for _ in range(100):
            k = int(rng.choice([1, 3, 7]))
            pad = int(rng.integers(0, k // 2 + 1))
            stride = int(rng.integers(1, 3))
            h = int(rng.integers(max(1, k - 2 * pad), k + 7))
            w = int(rng.integers(max(1, k - 2 * pad), k + 7))
            cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            x = rng.normal(size=(h, w, cin)).astype(np.float32)
            weights = rng.normal(size=(k, k, cin, cout)).astype(np.float32)
            bias = rng.normal(size=cout).astype(np.float32)
            out = conv2d(x, weights, bias, stride, pad)
            np.testing.assert_allclose(out, naive_conv(x, weights, bias, stride, pad), rtol=1e-5, atol=1e-5)

    def test_maxpool_matches_reference(self):
        """Test maxpool2d against a naive reference"""
        rng = np.random.default_rng(8)
        for _ in range(100):
            support = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            x = rng.normal(size=(int(rng.integers(support, 10)), int(rng.integers(support, 10)), 3)).astype(np.float32)
            np.testing.assert_array_equal(maxpool2d(x, support, stride), naive_maxpool(x, support, stride))

    def test_conv2d_shape_error_names_both_shapes(self):
        """Test channel mismatch reports input and weight shapes"""
        x = np.zeros((5, 5, 3), np.float32)
        w = np.zeros((3, 3, 4, 2), np.float32)
        with self.assertRaises(ShapeError) as ctx:
            conv2d(x, w, np.zeros(2, np.float32))
        self.assertIn("(5, 5, 3)", str(ctx.exception))
        self.assertIn("(3, 3, 4, 2)", str(ctx.exception))

    def test_softmax_normalizes_and_rejects_non_finite(self):
        """Test softmax rows sum to one and non-finite logits raise"""
        p = softmax(np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]], np.float32))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(p[1], 1 / 3, atol=1e-6)
        with self.assertRaises(NumericError):
            softmax(np.array([1.0, np.nan]))

    def test_dropout_eval_is_identity(self):
        """Test eval-mode dropout returns the input itself"""
        x = np.ones((4, 4), np.float32)
        self.assertIs(dropout(x, 0.3, "eval"), x)

    def test_dropout_mask_scales_survivors(self):
        """Test inverted dropout mask values"""
        mask = dropout_mask((1000,), 0.3, np.random.default_rng(0))
        values = set(np.unique(mask).tolist())
        self.assertTrue(values <= {0.0, np.float32(1 / 0.7).item()})
        self.assertAlmostEqual(float(np.mean(mask == 0)), 0.3, delta=0.06)

    def test_dropout_train_statistics(self):
        """Test train-mode dropout zeroes about 30% and rescales survivors"""
        x = np.ones(100_000, np.float32)
        out = dropout(x, 0.3, "train", np.random.default_rng(11))
        dropped = out == 0
        self.assertAlmostEqual(float(dropped.mean()), 0.3, delta=0.01)
        self.assertAlmostEqual(float(out[~dropped].mean()), 1 / 0.7, places=5)
        self.assertAlmostEqual(float(out.mean()), 1.0, delta=0.02)
        with self.assertRaises(ValueError):
            dropout(x, 0.3, "train")

    def test_softmax_closed_form_and_shift(self):
        """Test softmax of [0, ln 3] and invariance to adding a constant"""
        np.testing.assert_allclose(softmax(np.array([0.0, math.log(3.0)])), [0.25, 0.75], atol=1e-12)
        logits = np.random.default_rng(4).normal(size=(50, 8))
        for c in (-30.0, 5.0, 80.0):
            np.testing.assert_allclose(softmax(logits + c), softmax(logits), atol=1e-6)

    def test_relu(self):
        """Test relu clamps negatives and keeps dtype"""
        x = np.array([[-2.5, 0.0], [1.5, -0.0]], np.float32)
        out = relu(x)
        np.testing.assert_array_equal(out, [[0.0, 0.0], [1.5, 0.0]])
        self.assertEqual(out.dtype, np.float32)
        self.assertTrue(np.all(relu(np.random.default_rng(0).normal(size=1000)) >= 0))

    def test_as_tensor_dtypes_and_empty(self):
        """Test tensor construction keeps float64, casts the rest, rejects empty shapes"""
        self.assertEqual(as_tensor(np.zeros(3, np.float64)).dtype, np.float64)
        self.assertEqual(as_tensor([[1, 2]]).dtype, np.float32)
        with self.assertRaises(ShapeError):
            as_tensor(np.zeros((0, 3)))
        with self.assertRaises(ShapeError):
            as_tensor(1.0)


class NetworkTests(SimpleTestCase):
    def test_backbone_trace_matches_architecture_table(self):
        """Test static shape trace of the full-width backbone"""
        backbone = build_backbone()
        trace = dict(backbone.trace_shapes())
        expected = {
            "conv1_2": (224, 224, 64), "pool1": (112, 112, 64),
            "conv2_2": (112, 112, 128), "pool2": (56, 56, 128),
            "conv3_3": (56, 56, 256), "pool3": (28, 28, 256),
            "conv4_3": (28, 28, 512), "pool4": (14, 14, 512),
            "conv5_3": (14, 14, 512), "pool5": (7, 7, 512),
        }
        for name, shape in expected.items():
            self.assertEqual(trace[name], shape, name)
        self.assertEqual(backbone.layers[-1].index, 31)
        self.assertEqual(len(backbone.conv_layers), 13)

    def test_backbone_parameter_count(self):
        """Test the 13 convolutions hold 14,714,688 parameters"""
        self.assertEqual(build_backbone().parameter_count(), 14_714_688)

    def test_head_layers_follow_backbone(self):
        """Test head indices and output shapes"""
        backbone = build_backbone()
        full = compose(backbone, build_head())
        trace = dict(full.trace_shapes())
        self.assertEqual(trace["fc6"], (1, 1, 1000))
        self.assertEqual(trace["fc8"], (1, 1, 100))
        self.assertEqual(trace["prob"], (1, 1, 8))
        self.assertEqual([layer.index for layer in full.layers[31:]], list(range(32, 39)))
        self.assertEqual(full.trainable_from, 32)
        self.assertEqual(len(full.trainable_parameter_names()), 6)

    def test_forward_trace_matches_static_trace(self):
        """Test a reduced-width forward pass visits the declared shapes"""
        backbone = build_backbone(width_divisor=16)
        weights = {k: np.zeros(s, np.float32) for k, s in backbone.parameter_shapes().items()}
        trace = []
        out = forward(backbone, weights, np.zeros((224, 224, 3), np.float32), trace=trace)
        self.assertEqual(trace, backbone.trace_shapes())
        self.assertEqual(out.shape, (7, 7, 32))

    def test_full_width_forward_trace(self):
        """Test a full-width forward pass reaches pool5 at 7x7x512"""
        backbone = build_backbone()
        weights = {k: np.zeros(s, np.float32) for k, s in backbone.parameter_shapes().items()}
        trace = []
        out = forward(backbone, weights, np.ones((224, 224, 3), np.float32), trace=trace)
        self.assertEqual(trace, backbone.trace_shapes())
        self.assertEqual(dict(trace)["conv1_1"], (224, 224, 64))
        self.assertEqual(out.shape, (7, 7, 512))

    def test_train_mode_without_dropout_matches_eval(self):
        """Test train mode with a zero dropout rate equals eval mode"""
        head = build_head(in_shape=(3, 3, 8), hidden=(16, 8), dropout_rate=0.0)
        weights = init_weights(head, np.random.default_rng(0))
        features = np.random.default_rng(1).random((4, 3, 3, 8)).astype(np.float32)
        trained = forward(head, weights, features, "train", np.random.default_rng(2))
        np.testing.assert_array_equal(trained, forward(head, weights, features))

    def test_eval_forward_is_deterministic(self):
        """Test repeated eval passes are bitwise identical"""
        head = build_head(in_shape=(3, 3, 8), hidden=(16, 8))
        weights = init_weights(head, np.random.default_rng(0))
        features = np.random.default_rng(1).random((4, 3, 3, 8)).astype(np.float32)
        first = forward(head, weights, features, "eval")
        second = forward(head, weights, features, "eval", np.random.default_rng(9))
        self.assertEqual(first.tobytes(), second.tobytes())

    def test_head_outputs_probabilities(self):
        """Test head output is an 8-vector summing to one"""
        head = build_head(in_shape=(7, 7, 64))
        weights = init_weights(head, np.random.default_rng(0))
        features = np.random.default_rng(1).random((7, 7, 64)).astype(np.float32)
        out = forward(head, weights, features)
        self.assertEqual(out.shape, (1, 1, 8))
        self.assertAlmostEqual(float(out.sum()), 1.0, delta=1e-6)

    def test_init_weights_uniform_bounds(self):
        """Test Glorot bounds and zero biases"""
        head = build_head(num_classes=3, in_shape=(1, 1, 10), hidden=(5, 4))
        weights = init_weights(head, np.random.default_rng(0))
        limit = math.sqrt(6.0 / (10 + 5))
        self.assertLessEqual(float(np.abs(weights["fc6.weight"]).max()), limit)
        self.assertFalse(np.any(weights["fc6.bias"]))

    def test_compose_rejects_mismatched_head(self):
        """Test composition checks the backbone output shape"""
        with self.assertRaises(ShapeError):
            compose(build_backbone(width_divisor=2), build_head())

    def test_invalid_width_divisor(self):
        """Test width divisors must divide 64"""
        with self.assertRaises(ValueError):
            build_backbone(width_divisor=3)

    def test_spec_json_round_trip(self):
        """Test spec serialization reproduces the network"""
        model = build_model(width_divisor=8)
        self.assertEqual(loads_spec(dumps_spec(model.spec)), model.spec)

    def test_age_class_labels(self):
        """Test label, letter and lookup of age classes"""
        self.assertEqual(AgeClass.AGE_25_32.label, "25-32")
        self.assertEqual(AgeClass.AGE_25_32.letter, "e")
        self.assertEqual(AgeClass.from_label("60+"), AgeClass.AGE_60_PLUS)
        with self.assertRaises(ValueError):
            AgeClass.from_label("21-24")

    def test_unloaded_model_rejected(self):
        """Test probabilities need every tensor"""
        model = build_model(width_divisor=16)
        with self.assertRaises(ModelNotLoadedError):
            model.probabilities(np.zeros((1, 224, 224, 3), np.float32))


class WeightFormatTests(SimpleTestCase):
    def setUp(self):
        self.head = build_head(num_classes=3, in_shape=(1, 1, 10), hidden=(5, 4))
        self.store = init_weights(self.head, np.random.default_rng(3))
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.dir = Path(tmp.name)

    def test_round_trip_is_bitwise_exact(self):
        """Test save then load returns identical tensors and bytes"""
        path = save_weights(self.store, self.dir / "head.cage", self.head)
        loaded = load_weights(path, self.head)
        self.assertEqual(list(loaded), self.head.trainable_parameter_names())
        for name, tensor in self.store.items():
            self.assertEqual(loaded[name].dtype, np.float32)
            np.testing.assert_array_equal(loaded[name], tensor)
        self.assertEqual(encode_weights(loaded), path.read_bytes())

    def test_bad_magic(self):
        """Test a foreign file is rejected by its magic"""
        data = encode_weights(self.store)
        with self.assertRaises(MagicMismatchError):
            decode_weights(b"XXXX" + data[4:])

    def test_truncated_file(self):
        """Test a cut-off file is reported as truncated"""
        data = encode_weights(self.store)
        with self.assertRaises(TruncatedFileError):
            decode_weights(data[:-3])

    def test_dimension_mismatch(self):
        """Test a tensor with the wrong shape is rejected against the layer spec"""
        bad = dict(self.store)
        bad["fc8.weight"] = np.zeros((1, 1, 5, 5), np.float32)
        path = self.dir / "bad.cage"
        path.write_bytes(encode_weights(bad))
        with self.assertRaises(DimensionMismatchError) as ctx:
            load_weights(path, self.head)
        self.assertIn("fc8", str(ctx.exception))

    def test_backbone_filter_count_mismatch(self):
        """Test conv1_1 saved with 32 filters is rejected by the full backbone"""
        path = self.dir / "narrow.cage"
        path.write_bytes(encode_weights({
            "conv1_1.weight": np.zeros((3, 3, 3, 32), np.float32),
            "conv1_1.bias": np.zeros(32, np.float32),
        }))
        with self.assertRaises(DimensionMismatchError) as ctx:
            load_weights(path, build_backbone())
        self.assertIn("conv1_1", str(ctx.exception))
        self.assertIn("(3, 3, 3, 64)", str(ctx.exception))

    def test_version_and_unknown_layer(self):
        """Test other versions and unknown layers are distinct errors"""
        data = bytearray(encode_weights(self.store))
        data[4:8] = struct.pack("<I", 2)
        with self.assertRaises(VersionMismatchError):
            decode_weights(bytes(data))
        path = self.dir / "extra.cage"
        path.write_bytes(encode_weights({**self.store, "fc99.weight": np.zeros(2, np.float32)}))
        with self.assertRaises(UnknownLayerError):
            load_weights(path, self.head)

    def test_missing_file(self):
        """Test a missing weight file is a missing artifact"""
        with self.assertRaises(MissingArtifactError):
            load_weights(self.dir / "nope.cage")


class BoxTests(SimpleTestCase):
    def test_iou_examples(self):
        """Test overlap of disjoint, nested and half-overlapping boxes"""
        a = BoundingBox(0, 0, 10, 10, 0.9)
        self.assertEqual(iou(a, BoundingBox(20, 20, 30, 30)), 0.0)
        self.assertEqual(iou(a, a), 1.0)
        self.assertAlmostEqual(iou(a, BoundingBox(5, 0, 15, 10)), 50 / 150)
        inner = BoundingBox(2, 2, 6, 6)
        self.assertEqual(iou(a, inner, MIN), 1.0)
        self.assertAlmostEqual(iou(a, inner, UNION), 16 / 100)

    def test_nms_examples(self):
        """Test suppression keeps the best of each overlapping group"""
        boxes = [
            BoundingBox(0, 0, 10, 10, 0.8),
            BoundingBox(1, 1, 11, 11, 0.9),
            BoundingBox(50, 50, 60, 60, 0.7),
        ]
        kept = nms(boxes, 0.5)
        self.assertEqual([b.score for b in kept], [0.9, 0.7])
        self.assertEqual(nms([], 0.5), [])

    def test_nms_matches_brute_force(self):
        """Test vectorized NMS against the quadratic definition in both modes"""
        rng = np.random.default_rng(11)
        for _ in range(1000):
            boxes = []
            for _ in range(50):
                x1, y1 = rng.uniform(0, 100, 2)
                w, h = rng.uniform(1, 30, 2)
                boxes.append(BoundingBox(x1, y1, x1 + w, y1 + h, float(rng.random())))
            threshold = float(rng.uniform(0.2, 0.8))
            for mode in (UNION, MIN):
                self.assertEqual(nms(boxes, threshold, mode), brute_force_nms(boxes, threshold, mode))

    def test_nms_ignores_input_order(self):
        """Test shuffled input gives the same kept boxes"""
        rng = np.random.default_rng(2)
        boxes = [BoundingBox(x, x, x + 10, x + 10, s) for x, s in zip(range(0, 40, 3), rng.random(14))]
        shuffled = [boxes[i] for i in rng.permutation(len(boxes))]
        self.assertEqual(nms(boxes, 0.3), nms(shuffled, 0.3))

    def test_regression(self):
        """Test offsets scale with box width and height"""
        box = BoundingBox(10, 20, 30, 60, 0.5)
        self.assertEqual(apply_bbox_regression(box, [0, 0, 0, 0]), box)
        moved = apply_bbox_regression(box, [0.1, -0.25, 0.5, 0.0])
        self.assertEqual(moved.as_tuple(), (12.0, 10.0, 40.0, 60.0))
        self.assertEqual(moved.score, 0.5)
        with self.assertRaises(InvalidBoxError):
            apply_bbox_regression(box, [1.0, 0, -1.0, 0])

    def test_map_pnet_cell(self):
        """Test P-Net cells map to 12/scale windows every 2/scale pixels"""
        self.assertEqual(map_pnet_cell(0, 0, 1.0).as_tuple(), (0, 0, 12, 12))
        self.assertEqual(map_pnet_cell(1, 2, 0.5).as_tuple(), (8, 4, 32, 28))

    def test_square_pad(self):
        """Test the short side grows about the centre"""
        self.assertEqual(square_pad(BoundingBox(0, 0, 10, 20)).as_tuple(), (-5, 0, 15, 20))
        square = BoundingBox(0, 0, 8, 8)
        self.assertIs(square_pad(square), square)

    def test_invalid_boxes(self):
        """Test degenerate boxes and out-of-range scores are rejected"""
        with self.assertRaises(InvalidBoxError):
            BoundingBox(5, 5, 5, 10)
        with self.assertRaises(InvalidBoxError):
            BoundingBox(0, 0, 1, 1, score=1.5)


class PyramidTests(SimpleTestCase):
    def test_default_pyramid_levels(self):
        """Test a 224 image with min face 20 gives eight levels"""
        levels = build_pyramid(np.zeros((224, 224, 3), np.float32), 20, 0.709)
        self.assertEqual(len(levels), 8)
        self.assertAlmostEqual(levels[0].scale, 0.6)
        scales = [level.scale for level in levels]
        self.assertEqual(scales, sorted(scales, reverse=True))
        for level in levels:
            self.assertGreaterEqual(min(level.image.shape[:2]), 12)

    def test_minimal_and_too_small_images(self):
        """Test 12x12 gives one level at scale 1 and 10x10 none"""
        levels = build_pyramid(np.zeros((12, 12, 3), np.float32), 12, 0.709)
        self.assertEqual([level.scale for level in levels], [1.0])
        self.assertEqual(build_pyramid(np.zeros((10, 10, 3), np.float32), 12, 0.709), [])

    def test_invalid_pyramid_arguments(self):
        """Test min face below 12 and factors outside (0, 1) raise"""
        image = np.zeros((40, 40, 3), np.float32)
        with self.assertRaises(ValueError):
            build_pyramid(image, 10, 0.709)
        with self.assertRaises(ValueError):
            build_pyramid(image, 20, 1.0)


class CascadeStageTests(SimpleTestCase):
    def setUp(self):
        self.image = np.full((20, 20, 3), 128.0, np.float32)

    def test_blank_pnet_gives_no_proposals(self):
        """Test an all-background P-Net proposes nothing"""
        self.assertEqual(pnet_stage(self.image, StubPNet(np.zeros((5, 5)))), [])

    def test_single_cell_proposal(self):
        """Test one confident cell becomes one image-space window"""
        boxes = pnet_stage(np.zeros((12, 12, 3), np.float32), StubPNet([[0.9]]), min_face=12)
        self.assertEqual(len(boxes), 1)
        self.assertEqual(boxes[0].as_tuple(), (0, 0, 12, 12))
        self.assertAlmostEqual(boxes[0].score, 0.9, places=6)

    def test_adjacent_duplicates_are_merged(self):
        """Test neighbouring cells covering one face collapse to one box"""
        boxes = pnet_stage(np.zeros((12, 12, 3), np.float32), StubPNet([[0.9, 0.8]]), min_face=12)
        self.assertEqual(len(boxes), 1)
        self.assertAlmostEqual(boxes[0].score, 0.9, places=6)

    def test_threads_do_not_change_proposals(self):
        """Test scoring levels on workers gives the same proposals"""
        scores = np.random.default_rng(4).random((6, 6))
        image = np.zeros((60, 60, 3), np.float32)
        serial = pnet_stage(image, StubPNet(scores), threshold=0.5)
        threaded = pnet_stage(image, StubPNet(scores), threshold=0.5, threads=4)
        self.assertEqual(serial, threaded)

    def test_rnet_stage(self):
        """Test R-Net on no candidates, rejecting and accepting nets"""
        candidates = [BoundingBox(0, 0, 10, 10, 0.9), BoundingBox(5, 5, 18, 15, 0.8)]
        self.assertEqual(rnet_stage(self.image, [], StubRNet()), [])
        self.assertEqual(rnet_stage(self.image, candidates, StubRNet(score=0.1)), [])
        refined = rnet_stage(self.image, candidates, StubRNet(score=0.9))
        self.assertEqual(len(refined), 2)
        for box in refined:
            self.assertEqual(box.width, box.height)
            self.assertAlmostEqual(box.score, 0.9, places=6)

    def test_onet_landmarks(self):
        """Test landmarks at the box centre for a 48x48 detection"""
        detections = onet_stage(np.zeros((48, 48, 3), np.float32), [BoundingBox(0, 0, 48, 48, 0.9)],
                                StubONet(landmark=0.5))
        self.assertEqual(len(detections), 1)
        self.assertEqual(detections[0].stage, Stage.O)
        self.assertEqual(detections[0].landmarks, ((24.0, 24.0),) * 5)

    def test_detect_faces_end_to_end(self):
        """Test the graph runs all stages and counts survivors"""
        config = PipelineConfig()
        result = detect_faces(self.image, StubNets(), config)
        self.assertEqual(result.counts, {'P': 1, 'R': 1, 'O': 1})
        self.assertEqual(result.levels, 1)
        np.testing.assert_allclose(result.detections[0].box.as_tuple(), (0, 0, 20, 20))

    def test_detect_faces_stops_without_proposals(self):
        """Test later stages never run when P-Net finds nothing"""
        rnet = mock.MagicMock()
        nets = StubNets(pnet=StubPNet(np.zeros((3, 3))), rnet=rnet)
        result = detect_faces(self.image, nets, PipelineConfig())
        rnet.assert_not_called()
        self.assertEqual(result.detections, [])
        self.assertEqual(result.counts, {'P': 0, 'R': 0, 'O': 0})

    def test_detect_faces_rejects_grey_images(self):
        """Test the cascade needs three channels"""
        with self.assertRaises(ShapeError):
            detect_faces(np.zeros((20, 20), np.float32), StubNets(), PipelineConfig())


class DetectorNetworkTests(SimpleTestCase):
    def test_stage_output_shapes(self):
        """Test randomly initialized stages honour their call contracts"""
        nets = init_detector(np.random.default_rng(0))
        rng = np.random.default_rng(1)
        scores, offsets = nets.pnet(rng.uniform(0, 255, (30, 30, 3)).astype(np.float32))
        self.assertEqual(scores.shape, (10, 10))
        self.assertEqual(offsets.shape, (10, 10, 4))
        self.assertTrue(np.all((scores >= 0) & (scores <= 1)))
        scores, offsets = nets.rnet(rng.uniform(0, 255, (2, 24, 24, 3)).astype(np.float32))
        self.assertEqual((scores.shape, offsets.shape), ((2,), (2, 4)))
        scores, offsets, landmarks = nets.onet(rng.uniform(0, 255, (2, 48, 48, 3)).astype(np.float32))
        self.assertEqual((scores.shape, offsets.shape, landmarks.shape), ((2,), (2, 4), (2, 10)))

    def test_random_cascade_runs(self):
        """Test an untrained cascade keeps stage counts non-increasing"""
        nets = init_detector(np.random.default_rng(0))
        image = np.random.default_rng(5).uniform(0, 255, (40, 40, 3)).astype(np.float32)
        counts = detect_faces(image, nets, PipelineConfig()).counts
        self.assertGreaterEqual(counts['P'], counts['R'])
        self.assertGreaterEqual(counts['R'], counts['O'])

    def test_save_and_load_detector(self):
        """Test one weight file restores all three stages"""
        nets = init_detector(np.random.default_rng(0))
        with tempfile.TemporaryDirectory() as tmp:
            path = save_weights(nets.pnet.weights, Path(tmp) / "mtcnn.cage", detector_specs())
            loaded = load_detector(path)
        crops = np.random.default_rng(2).uniform(0, 255, (1, 24, 24, 3)).astype(np.float32)
        np.testing.assert_array_equal(loaded.rnet(crops)[0], nets.rnet(crops)[0])

    def test_unconfigured_detector(self):
        """Test a blank weight path is a missing model"""
        with self.assertRaises(ModelNotLoadedError):
            load_detector("")


class ChipTests(SimpleTestCase):
    def test_identity_chip(self):
        """Test a full-image box at native size reproduces the image"""
        image = np.random.default_rng(0).uniform(0, 255, (16, 16, 3)).astype(np.float32)
        chip = extract_face_chip(image, BoundingBox(0, 0, 16, 16), 16)
        np.testing.assert_allclose(chip, image, atol=1e-4)

    def test_downsampled_gradient(self):
        """Test downsampling a linear ramp samples at pixel-centre positions"""
        yy, xx = np.mgrid[0:8, 0:8].astype(np.float32)
        image = np.repeat((10 * yy + xx)[..., None], 3, axis=2)
        chip = extract_face_chip(image, BoundingBox(0, 0, 8, 8), 4)
        centres = 2 * np.arange(4) + 0.5
        expected = 10 * centres[:, None] + centres[None, :]
        np.testing.assert_allclose(chip[..., 0], expected, atol=1e-4)

    def test_outside_image_is_zero_filled(self):
        """Test regions beyond the border are black"""
        image = np.full((10, 10, 3), 200.0, np.float32)
        chip = extract_face_chip(image, BoundingBox(-10, 0, 10, 10), 20)
        self.assertEqual(float(chip[5, 0, 0]), 0.0)
        self.assertAlmostEqual(float(chip[5, -1, 0]), 200.0, places=3)

    def test_constant_image_gives_constant_chip(self):
        """Test upsampling a box that touches the border does not darken its edges"""
        image = np.full((20, 20, 3), 100.0, np.float32)
        chip = crop_and_resize(image, (0, 0, 10, 10), 48, 48, fill=ZERO)
        np.testing.assert_allclose(chip, 100.0, atol=1e-4)
        whole = extract_face_chip(np.full((16, 16, 3), 50.0, np.float32), BoundingBox(0, 0, 16, 16), 32)
        np.testing.assert_allclose(whole, 50.0, atol=1e-4)
        corner = extract_face_chip(image, BoundingBox(12, 12, 20, 20), 64)
        np.testing.assert_allclose(corner, 100.0, atol=1e-4)

    def test_detection_line_with_spaces_in_path(self):
        """Test a source path containing spaces parses back intact"""
        detection = Detection(BoundingBox(0, 0, 10, 10, 0.5), ((1.0, 2.0),) * 5, Stage.O)
        path, parsed = parse_detection(format_detection("25-32/my photo 1.png", detection))
        self.assertEqual(path, "25-32/my photo 1.png")
        self.assertEqual(parsed.box.as_tuple(), (0.0, 0.0, 10.0, 10.0))

    def test_chip_names_keep_source_extension(self):
        """Test same-stem images with different formats get distinct chips"""
        self.assertEqual(chip_name(Path("a.png"), 0), "a_png_face0.png")
        self.assertNotEqual(chip_name(Path("a.png"), 0), chip_name(Path("a.jpg"), 0))

    def test_detection_line_round_trip(self):
        """Test a detection line carries box, score and five landmarks"""
        detection = Detection(BoundingBox(1.5, 2.25, 30.0, 40.125, 0.987654), ((10.0, 11.0),) * 5, Stage.O)
        line = format_detection("25-32/a.png", detection)
        self.assertTrue(line.startswith("25-32/a.png 1.50 2.25 30.00 40.12 0.987654 10.00 11.00"))
        path, parsed = parse_detection(line)
        self.assertEqual(path, "25-32/a.png")
        self.assertEqual(parsed.landmarks, detection.landmarks)
        with self.assertRaises(ValueError):
            parse_detection("a.png 1 2 3")


class DatasetTests(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.root = Path(tmp.name)

    def test_ingest_class_tree(self):
        """Test every image under a known class directory becomes a sample"""
        make_class_tree(self.root)
        manifest = ingest(self.root)
        self.assertEqual(len(manifest), 16)
        self.assertEqual({s.label for s in manifest.samples}, set(AgeClass))
        self.assertTrue(all(s.split is None for s in manifest.samples))

    def test_ingest_skips_unknown_dirs_and_unreadable_files(self):
        """Test stray directories and corrupt files are logged and skipped"""
        make_class_tree(self.root, per_class=1)
        write_png(self.root / "21-24" / "x.png", np.zeros((4, 4, 3)))
        (self.root / "0-2" / "broken.png").write_bytes(b"not an image")
        with self.assertLogs("estimator", level="WARNING") as logs:
            manifest = ingest(self.root)
        self.assertEqual(len(manifest), 8)
        self.assertTrue(any("21-24" in line for line in logs.output))
        self.assertTrue(any("broken.png" in line for line in logs.output))

    def test_ingest_errors(self):
        """Test missing and empty dataset roots"""
        with self.assertRaises(MissingArtifactError):
            ingest(self.root / "missing")
        (self.root / "0-2").mkdir()
        with self.assertRaises(EmptyDatasetError):
            ingest(self.root)

    def _manifest(self, per_class):
        samples = [
            Sample(f"{cls.label}/img{i:03d}.png", cls)
            for cls, n in zip(AgeClass, per_class) for i in range(n)
        ]
        return DatasetManifest(samples)

    def test_split_ratio(self):
        """Test ten samples of one class split eight to two"""
        result = split(self._manifest([10]), 0.8, seed=0)
        self.assertEqual(len(result.subset(TRAIN)), 8)
        self.assertEqual(len(result.subset(VAL)), 2)

    def test_split_per_class_counts(self):
        """Test every class is split on its own with the ceiling rule"""
        per_class = [13, 13, 13, 13, 12, 12, 12, 12]
        counts = split(self._manifest(per_class), 0.8, seed=4).counts()
        for cls, n in zip(AgeClass, per_class):
            self.assertEqual(counts[cls]["total"], n)
            self.assertEqual(counts[cls][TRAIN], math.ceil(0.8 * n))
            self.assertEqual(counts[cls][VAL], n - math.ceil(0.8 * n))

    def test_split_is_deterministic(self):
        """Test the same seed gives the same split whatever the input order"""
        manifest = self._manifest([20, 7, 5])
        reversed_manifest = DatasetManifest(list(reversed(manifest.samples)))
        self.assertEqual(split(manifest, 0.8, 3).samples, split(reversed_manifest, 0.8, 3).samples)
        self.assertNotEqual(split(manifest, 0.8, 3).subset(VAL), split(manifest, 0.8, 4).subset(VAL))

    def test_single_sample_class_goes_to_train(self):
        """Test a class with one image lands in train with a warning"""
        with self.assertLogs("estimator.dataset", level="WARNING"):
            result = split(self._manifest([1, 5]), 0.8, 0)
        lone = [s for s in result.samples if s.label == AgeClass.AGE_0_2]
        self.assertEqual([s.split for s in lone], [TRAIN])

    def test_manifest_text_round_trip(self):
        """Test the manifest file reproduces the samples"""
        result = split(self._manifest([4, 3]), 0.8, 1)
        text = dumps_manifest(result)
        self.assertEqual(text.splitlines()[0].split("\t")[1], "0-2")
        self.assertEqual(loads_manifest(text).samples, result.samples)


class AugmentTests(SimpleTestCase):
    def test_rescale_native_size_is_unchanged(self):
        """Test a 256x256 input is returned bit for bit"""
        image = np.random.default_rng(0).uniform(0, 255, (256, 256, 3)).astype(np.float32)
        np.testing.assert_array_equal(rescale_image(image), image)

    def test_rescale_constant_and_gradient(self):
        """Test rescaling keeps constants and samples a ramp at pixel centres"""
        constant = np.full((100, 300, 3), 77.0, np.float32)
        np.testing.assert_allclose(rescale_image(constant), 77.0, atol=1e-4)
        yy, xx = np.mgrid[0:512, 0:512].astype(np.float32)
        ramp = np.repeat((0.25 * yy + 0.125 * xx)[..., None], 3, axis=2)
        centres = 2 * np.arange(256) + 0.5
        expected = 0.25 * centres[:, None] + 0.125 * centres[None, :]
        np.testing.assert_allclose(rescale_image(ramp)[..., 1], expected, rtol=1e-5, atol=1e-4)

    def test_random_crop_is_exact_window(self):
        """Test crops copy a window of the source without resampling"""
        yy, xx = np.mgrid[0:256, 0:256].astype(np.float32)
        image = np.stack([yy, xx, np.zeros_like(yy)], axis=2)
        crop = random_crop(image, 224, np.random.default_rng(5))
        top, left = int(crop[0, 0, 0]), int(crop[0, 0, 1])
        np.testing.assert_array_equal(crop, image[top:top + 224, left:left + 224])
        np.testing.assert_array_equal(random_crop(image, 224, np.random.default_rng(5)), crop)

    def test_random_crop_offsets_are_uniform(self):
        """Test crop offsets cover 0..32 evenly (chi-square)"""
        yy, xx = np.mgrid[0:40, 0:40].astype(np.float32)
        image = np.stack([yy, xx, np.zeros_like(yy)], axis=2)
        rng = np.random.default_rng(0)
        tops = np.array([int(random_crop(image, 8, rng)[0, 0, 0]) for _ in range(10_000)])
        observed = np.bincount(tops, minlength=33)
        self.assertEqual(len(observed), 33)
        expected = 10_000 / 33
        chi2 = float(np.sum((observed - expected) ** 2 / expected))
        self.assertLess(chi2, 70.0)

    def test_center_crop(self):
        """Test the centre view starts at offset 16"""
        yy, xx = np.mgrid[0:256, 0:256].astype(np.float32)
        image = np.stack([yy, xx, np.zeros_like(yy)], axis=2)
        crop = center_crop(image)
        self.assertEqual((crop[0, 0, 0], crop[0, 0, 1]), (16.0, 16.0))

    def test_horizontal_flip(self):
        """Test forced flips mirror columns and two flips restore the image"""
        image = np.zeros((4, 6, 3), np.float32)
        image[:, 3:] = 255.0
        rng = np.random.default_rng(0)
        flipped = horizontal_flip(image, 1.0, rng)
        self.assertEqual(float(flipped[0, 0, 0]), 255.0)
        self.assertEqual(float(flipped[0, -1, 0]), 0.0)
        np.testing.assert_array_equal(horizontal_flip(flipped, 1.0, rng), image)
        self.assertIs(horizontal_flip(image, 0.0, rng), image)

    def test_rotate_zero_and_constant(self):
        """Test a zero angle copies the image and constants stay constant"""
        image = np.random.default_rng(1).uniform(0, 255, (32, 32, 3)).astype(np.float32)
        np.testing.assert_array_equal(rotate(image, 0.0), image)
        constant = np.full((32, 32, 3), 100.0, np.float32)
        np.testing.assert_allclose(rotate(constant, 7.5), 100.0, atol=1e-4)
        with self.assertRaises(ValueError):
            rotate(image, 50.0)

    def test_rotate_round_trip(self):
        """Test rotating by +10 then -10 degrees stays within 2% on a smooth ramp"""
        yy, xx = np.mgrid[0:64, 0:64].astype(np.float32)
        image = np.repeat((2 * (xx + yy) + 50)[..., None], 3, axis=2)
        restored = rotate(rotate(image, 10.0), -10.0)
        self.assertLess(float(np.mean(np.abs(restored - image)) / np.mean(image)), 0.02)

    def test_augmenter_is_seeded_per_sample(self):
        """Test the chain depends only on (seed, epoch, index)"""
        image = np.random.default_rng(2).uniform(0, 255, (60, 80, 3)).astype(np.float32)
        augment = Augmenter()
        first = augment(image, sample_rng(0, 1, 3))
        self.assertEqual(first.shape, (224, 224, 3))
        np.testing.assert_array_equal(augment(image, sample_rng(0, 1, 3)), first)
        self.assertFalse(np.array_equal(augment(image, sample_rng(0, 2, 3)), first))


def tiny_head(dropout_rate=0.3):
    return build_head(num_classes=3, in_shape=(1, 1, 10), hidden=(5, 4), dropout_rate=dropout_rate)


class TrainingTests(SimpleTestCase):
    def test_cross_entropy_closed_forms(self):
        """Test cross-entropy of one-hot, uniform and half-confident outputs"""
        t = np.eye(8)[2]
        self.assertEqual(cross_entropy(t, t), 0.0)
        self.assertAlmostEqual(cross_entropy(np.full(8, 1 / 8), t), math.log(8), places=12)
        p = np.full(8, 0.5 / 7)
        p[2] = 0.5
        self.assertAlmostEqual(cross_entropy(p, t), math.log(2), places=12)
        self.assertTrue(math.isfinite(cross_entropy(np.eye(8)[0], t)))

    def test_softmax_ce_grad_closed_forms(self):
        """Test p - t for uniform logits and for saturated logits"""
        t = np.eye(8)[0]
        expected = np.full(8, 1 / 8)
        expected[0] -= 1
        np.testing.assert_array_equal(softmax_ce_grad(np.zeros(8), t), expected)
        np.testing.assert_array_equal(softmax_ce_grad(np.array([0.0, -1000.0]), np.array([1.0, 0.0])), [0.0, 0.0])

    def test_softmax_ce_grad_matches_finite_differences(self):
        """Test the logit gradient numerically"""
        rng = np.random.default_rng(0)
        z = rng.normal(size=8)
        t = np.eye(8)[5]
        h = 1e-5
        numeric = np.array([
            (cross_entropy(softmax(z + h * e), t) - cross_entropy(softmax(z - h * e), t)) / (2 * h)
            for e in np.eye(8)
        ])
        np.testing.assert_allclose(softmax_ce_grad(z, t), numeric, rtol=1e-6, atol=1e-9)

    def _well_conditioned_problem(self, head):
        # keep every pre-activation away from the relu kink
        for seed in range(500):
            rng = np.random.default_rng(seed)
            weights = init_weights(head, rng, dtype=np.float64)
            for name in weights:
                if name.endswith(".bias"):
                    weights[name] = rng.normal(0, 0.1, weights[name].shape)
            features = rng.normal(0, 0.5, (4, 1, 1, 10))
            masks = draw_dropout_masks(head, 4, rng, np.float64)
            z6 = features.reshape(4, 10) @ weights["fc6.weight"].reshape(10, 5) + weights["fc6.bias"]
            z8 = (np.maximum(z6, 0) * masks["dropout7"]) @ weights["fc8.weight"].reshape(5, 4) + weights["fc8.bias"]
            if min(np.abs(z6).min(), np.abs(z8).min()) > 0.05:
                return weights, features, masks
        self.fail("no well-conditioned seed found")

    def test_head_gradients_match_finite_differences(self):
        """Test backpropagation against central differences on a small head"""
        head = tiny_head()
        weights, features, masks = self._well_conditioned_problem(head)
        labels = np.array([0, 1, 2, 1])
        _, grads = head_loss_and_grads(head, weights, features, labels, "train", masks=masks)
        h = 1e-3
        for name, tensor in weights.items():
            for idx in np.ndindex(tensor.shape):
                plus, minus = tensor.copy(), tensor.copy()
                plus[idx] += h
                minus[idx] -= h
                up = head_loss_and_grads(head, {**weights, name: plus}, features, labels, "train", masks=masks)[0]
                down = head_loss_and_grads(head, {**weights, name: minus}, features, labels, "train", masks=masks)[0]
                numeric = (up - down) / (2 * h)
                analytic = float(grads[name][idx])
                self.assertLessEqual(abs(analytic - numeric), 1e-4 * max(abs(analytic), abs(numeric)) + 1e-6,
                                     f"{name}{idx}: {analytic} vs {numeric}")

    def test_zero_features_give_zero_first_layer_gradient(self):
        """Test fc6 weights get no gradient from all-zero inputs"""
        head = tiny_head()
        weights = init_weights(head, np.random.default_rng(0))
        grads = backward_head(head, weights, np.zeros((3, 1, 1, 10), np.float32), [0, 1, 2], "eval")
        self.assertFalse(np.any(grads["fc6.weight"]))
        self.assertEqual(set(grads), set(head.trainable_parameter_names()))

    def test_same_masks_same_gradients(self):
        """Test fixed dropout masks make the backward pass repeatable"""
        head = tiny_head()
        weights = init_weights(head, np.random.default_rng(0))
        features = np.random.default_rng(1).normal(size=(5, 1, 1, 10)).astype(np.float32)
        masks = draw_dropout_masks(head, 5, np.random.default_rng(2))
        first = backward_head(head, weights, features, [0, 1, 2, 0, 1], masks=masks)
        second = backward_head(head, weights, features, [0, 1, 2, 0, 1], masks=masks)
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])

    def test_adam_first_step(self):
        """Test the first Adam step moves by the learning rate against the gradient"""
        params, state = adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, AdamState(learning_rate=0.1))
        self.assertAlmostEqual(float(params["w"][0]), -0.1, delta=1e-6)
        self.assertEqual(state.step, 1)
        unchanged, _ = adam_step({"w": np.array([2.0])}, {"w": np.array([0.0])}, AdamState())
        self.assertEqual(float(unchanged["w"][0]), 2.0)

    def test_adam_does_not_mutate_inputs(self):
        """Test params and state are returned fresh"""
        params = {"w": np.ones(3)}
        state = AdamState()
        adam_step(params, {"w": np.ones(3)}, state)
        np.testing.assert_array_equal(params["w"], np.ones(3))
        self.assertEqual(state.step, 0)
        self.assertEqual(state.m, {})

    def _separable(self):
        features = np.zeros((8, 1, 1, 24), np.float32)
        for c in range(8):
            features[c, 0, 0, 3 * c:3 * c + 3] = 4.0
        head = build_head(num_classes=8, in_shape=(1, 1, 24), hidden=(32, 16), dropout_rate=0.0)
        return head, init_weights(head, np.random.default_rng(0)), features, np.arange(8)

    def test_overfits_separable_features(self):
        """Test eight separable feature vectors are learned perfectly"""
        head, weights, features, labels = self._separable()
        result = train_on_features(head, weights, features, labels, TrainConfig(epochs=200, batch_size=8, learning_rate=5e-3))
        self.assertEqual(result.log[-1].train_accuracy, 1.0)
        self.assertLess(result.log[-1].loss, result.log[0].loss)

    def test_full_batch_loss_does_not_increase(self):
        """Test the first small Adam steps on the full batch lower the loss"""
        head, weights, features, labels = self._separable()
        trainer = HeadTrainer(head, weights, TrainConfig(batch_size=8, learning_rate=1e-4))
        losses = [trainer.run_epoch(epoch, features, labels) for epoch in range(1, 7)]
        for before, after in zip(losses, losses[1:]):
            self.assertLessEqual(after, before + 1e-12)

    def test_zero_learning_rate_keeps_weights(self):
        """Test lr 0 leaves every head parameter at its initial value"""
        head, weights, features, labels = self._separable()
        result = train_on_features(head, weights, features, labels, TrainConfig(epochs=3, learning_rate=0.0))
        for name in head.trainable_parameter_names():
            np.testing.assert_array_equal(result.weights[name], weights[name])

    def test_training_is_deterministic(self):
        """Test the same seed gives identical logs and weights"""
        head = tiny_head()
        weights = init_weights(head, np.random.default_rng(0))
        features = np.random.default_rng(1).normal(size=(12, 1, 1, 10)).astype(np.float32)
        labels = np.arange(12) % 3
        config = TrainConfig(epochs=3, batch_size=5, seed=9)
        first = train_on_features(head, weights, features, labels, config, val=(features[:4], labels[:4]))
        second = train_on_features(head, weights, features, labels, config, val=(features[:4], labels[:4]))
        self.assertEqual(first.log, second.log)
        for name in first.weights:
            np.testing.assert_array_equal(first.weights[name], second.weights[name])

    def test_non_finite_loss_raises(self):
        """Test a diverged batch is a numeric error"""
        head = tiny_head(dropout_rate=0.0)
        weights = init_weights(head, np.random.default_rng(0))
        features = np.full((2, 1, 1, 10), np.inf, np.float32)
        with self.assertRaises(NumericError):
            HeadTrainer(head, weights, TrainConfig(batch_size=2)).run_epoch(1, features, np.array([0, 1]))

    def test_train_keeps_backbone_frozen(self):
        """Test image training only returns and changes head tensors"""
        with tempfile.TemporaryDirectory() as tmp:
            paths = make_class_tree(tmp, per_class=1)
            manifest = DatasetManifest([Sample(str(p), AgeClass.from_label(p.parent.name), TRAIN) for p in paths])
            model = build_model(width_divisor=16)
            model.weights.update(init_weights(model.spec, np.random.default_rng(0)))
            frozen = model.spec.frozen_parameter_names()
            backbone_before = {k: model.weights[k].copy() for k in frozen}
            result = train(model, manifest, TrainConfig(epochs=1, batch_size=8), Augmenter(rotation_degrees=0.0))
        self.assertEqual(set(frozen), set(model.backbone.parameter_shapes()))
        self.assertEqual(set(result.weights), set(model.head.trainable_parameter_names()))
        for name, tensor in backbone_before.items():
            np.testing.assert_array_equal(model.weights[name], tensor)
        self.assertEqual(len(result.log), 1)

    def test_train_needs_training_samples(self):
        """Test a manifest without a train split is rejected"""
        model = build_model(width_divisor=16)
        with self.assertRaises(EmptyDatasetError):
            train(model, DatasetManifest([Sample("a.png", AgeClass.AGE_0_2, VAL)]), TrainConfig(epochs=1))


class StubAgeModel:
    """Per-crop probabilities computed from two pixels of each crop, or fixed rows."""

    def __init__(self, rows=None):
        self.rows = rows
        self.batches = []

    def probabilities(self, crops):
        self.batches.append(crops.shape)
        if self.rows is not None:
            return np.asarray(self.rows, np.float32)
        signal = (crops[:, 0, 0, 0].astype(np.float64) + crops[:, 112, 112, 1]) / 510.0
        return softmax(np.outer(signal, np.arange(8.0))).astype(np.float32)


class InferenceTests(SimpleTestCase):
    def test_five_crop_offsets(self):
        """Test corner and centre crops start at their documented offsets"""
        yy, xx = np.mgrid[0:256, 0:256].astype(np.float32)
        image = np.stack([yy, xx, np.zeros_like(yy)], axis=2)
        crops = five_crop(image)
        self.assertEqual(len(crops), 5)
        for crop, (top, left) in zip(crops, FIVE_CROP_OFFSETS):
            self.assertEqual(crop.shape, (224, 224, 3))
            self.assertEqual((crop[0, 0, 0], crop[0, 0, 1]), (top, left))
        self.assertEqual(FIVE_CROP_OFFSETS[-1], (16, 16))
        with self.assertRaises(ShapeError):
            five_crop(np.zeros((224, 224, 3), np.float32))

    def test_uniform_probabilities_pick_lowest_class(self):
        """Test ties resolve to the youngest age range"""
        prediction = predict(StubAgeModel(np.full((5, 8), 0.125)), np.zeros((256, 256, 3), np.float32))
        self.assertEqual(prediction.predicted, AgeClass.AGE_0_2)
        self.assertAlmostEqual(prediction.confidence, 0.125)

    def test_crops_are_averaged(self):
        """Test the prediction is the mean of the five crop vectors"""
        rows = np.random.default_rng(0).dirichlet(np.ones(8), 5).astype(np.float32)
        model = StubAgeModel(rows)
        prediction = predict(model, np.zeros((300, 200, 3), np.float32))
        self.assertEqual(model.batches, [(5, 224, 224, 3)])
        np.testing.assert_allclose(prediction.probs, rows.astype(np.float64).mean(axis=0), atol=1e-7)
        self.assertAlmostEqual(float(prediction.probs.sum()), 1.0, places=5)
        np.testing.assert_array_equal(average_crops(rows).per_crop, rows)

    def test_crop_order_does_not_change_average(self):
        """Test the averaged vector is the same for any order of the five crops"""
        rng = np.random.default_rng(5)
        rows = rng.dirichlet(np.ones(8), 5).astype(np.float32)
        expected = average_crops(rows)
        for _ in range(20):
            shuffled = average_crops(rows[rng.permutation(5)])
            np.testing.assert_allclose(shuffled.probs, expected.probs, atol=1e-7)
            self.assertEqual(shuffled.predicted, expected.predicted)

    def test_constant_image_matches_centre_crop(self):
        """Test all five crops agree on a constant image"""
        model = StubAgeModel()
        image = np.full((256, 256, 3), 90.0, np.float32)
        prediction = predict(model, image)
        centre = model.probabilities(center_crop(image)[None])[0]
        np.testing.assert_allclose(prediction.probs, centre, atol=1e-7)

    def test_predict_batch_orders_and_skips(self):
        """Test results are sorted by path and unreadable files skipped"""
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            write_png(root / "b.png", np.zeros((30, 30, 3)))
            write_png(root / "a.png", np.full((30, 30, 3), 255))
            (root / "c.png").write_bytes(b"garbage")
            paths = [root / "c.png", root / "b.png", root / "a.png"]
            results = predict_batch(StubAgeModel(), paths)
        self.assertEqual([Path(path).name for path, _ in results], ["a.png", "b.png"])
        self.assertEqual(predict_batch(StubAgeModel(), []), [])

    def test_prediction_log_line(self):
        """Test the log holds path, label and eight probabilities"""
        prediction = average_crops(np.full((5, 8), 0.125, np.float32))
        text = dumps_predictions([("img/x.png", prediction)])
        fields = text.rstrip("\n").split("\t")
        self.assertEqual(fields[:3], ["img/x.png", "0-2", "0.125000"])
        self.assertEqual(len(fields), 10)


class EvaluationTests(SimpleTestCase):
    def test_accuracy_examples(self):
        """Test exact and 1-off accuracy on a small example"""
        preds, truths = [0, 1, 3, 7], [0, 2, 3, 5]
        self.assertEqual(exact_accuracy(preds, truths), 0.5)
        self.assertEqual(one_off_accuracy(preds, truths), 0.75)
        self.assertAlmostEqual(exact_accuracy([0, 1, 4], [1, 1, 2]), 1 / 3)
        self.assertAlmostEqual(one_off_accuracy([0, 1, 4], [1, 1, 2]), 2 / 3)

    @mock.patch('estimator.evaluation.logger')
    def test_report_matches_brute_force_tally(self, mock_logger):
        """Test per-class rates and accuracy identities on 1000 random label sets"""
        rng = np.random.default_rng(21)
        for _ in range(1000):
            n = int(rng.integers(1, 60))
            preds, truths = rng.integers(0, 8, n), rng.integers(0, 8, n)
            report = classification_report(preds, truths)
            for c in range(8):
                tp = int(np.sum((preds == c) & (truths == c)))
                predicted, support = int(np.sum(preds == c)), int(np.sum(truths == c))
                precision = tp / predicted if predicted else 0.0
                recall = tp / support if support else 0.0
                f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
                self.assertAlmostEqual(report.precision[c], precision, places=12)
                self.assertAlmostEqual(report.recall[c], recall, places=12)
                self.assertAlmostEqual(report.f1[c], f1, places=12)
                self.assertEqual(report.support[c], support)
            exact = exact_accuracy(preds, truths)
            self.assertAlmostEqual(report.weighted[1], exact, places=12)
            self.assertAlmostEqual(confusion(preds, truths).trace_accuracy(), exact, places=12)
            self.assertGreaterEqual(one_off_accuracy(preds, truths), exact)

    def test_confusion_matches_tally(self):
        """Test the confusion matrix against a direct count"""
        rng = np.random.default_rng(0)
        preds, truths = rng.integers(0, 8, 1000), rng.integers(0, 8, 1000)
        expected = np.zeros((8, 8), np.int64)
        for t, p in zip(truths, preds):
            expected[t, p] += 1
        cm = confusion(preds, truths)
        np.testing.assert_array_equal(cm.counts, expected)
        self.assertEqual(cm.total, 1000)
        self.assertAlmostEqual(cm.trace_accuracy(), exact_accuracy(preds, truths))
        np.testing.assert_allclose(cm.normalized().sum(axis=1), 1.0)

    def test_normalize_keeps_empty_rows_zero(self):
        """Test rows without samples stay zero"""
        np.testing.assert_array_equal(normalize([[0, 0], [1, 3]]), [[0.0, 0.0], [0.25, 0.75]])

    def test_published_macro_averages(self):
        """Test macro averages of a published per-class report round as printed"""
        report = ClassReport.from_per_class(
            [0.95, 0.86, 0.81, 0.60, 0.58, 0.49, 0.66, 0.70],
            [0.99, 0.80, 0.75, 0.68, 0.47, 0.67, 0.42, 0.80],
            [0.97, 0.83, 0.78, 0.64, 0.52, 0.57, 0.51, 0.75],
            [1427, 2162, 2294, 1653, 4897, 2350, 825, 869],
        )
        precision, recall, _ = report.macro
        self.assertEqual(f"{precision:.2f}", "0.71")
        self.assertEqual(f"{recall:.2f}", "0.70")
        self.assertEqual(report.total, 16477)

    def test_perfect_predictions(self):
        """Test every rate is one when each class is predicted correctly"""
        labels = np.tile(np.arange(8), 3)
        report = classification_report(labels, labels)
        np.testing.assert_array_equal(report.precision, np.ones(8))
        np.testing.assert_array_equal(report.recall, np.ones(8))
        self.assertEqual(report.warnings, [])
        self.assertEqual(report.weighted[1], report.accuracy)

    def test_undefined_rates_are_zero_with_warnings(self):
        """Test never-predicted and absent classes report zero and warn"""
        with self.assertLogs("estimator.evaluation", level="WARNING"):
            report = classification_report([0, 0], [0, 1])
        self.assertEqual(report.precision[1], 0.0)
        self.assertEqual(report.recall[1], 0.0)
        self.assertTrue(any("4-6" in w and "never predicted" in w for w in report.warnings))
        self.assertTrue(any("8-13" in w and "no samples" in w for w in report.warnings))

    def test_invalid_inputs(self):
        """Test empty, mismatched and out-of-range label sets"""
        with self.assertRaises(EmptyDatasetError):
            exact_accuracy([], [])
        with self.assertRaises(ValueError):
            exact_accuracy([0, 1], [0])
        with self.assertRaises(ValueError):
            confusion([8], [0])

    def test_evaluate_and_render(self):
        """Test the full report lists accuracies, letters and confident errors"""
        rows = [("a", 0, 0, 0.9), ("b", 1, 3, 0.8), ("c", 2, 2, 0.7), ("d", 5, 4, 0.95)]
        report = evaluate(rows, limit=5)
        self.assertEqual(report.exact, 0.5)
        self.assertEqual(report.one_off, 0.75)
        self.assertEqual([e.path for e in report.misclassified], ["d", "b"])
        text = render_report(report)
        self.assertIn("Exact accuracy: 50.00%", text)
        self.assertIn("1-off accuracy: 75.00%", text)
        self.assertIn("a = 0-2", text)
        self.assertIn("h = 60+", text)


class ConfigTests(SimpleTestCase):
    def test_dump_parse_round_trip(self):
        """Test a dumped configuration parses back to the same values"""
        config = PipelineConfig(seed=9, learning_rate=0.1 + 0.2, detect_on_predict=True, mean_r=120.5,
                                output_dir="runs/x", epochs=0)
        self.assertEqual(parse_config(dump_config(config)), config)
        self.assertIn("detect_on_predict=true\n", dump_config(config))

    def test_command_line_overrides_file(self):
        """Test overrides beat the config file which beats the defaults"""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.txt"
            path.write_text("# run settings\nseed=5\nepochs=3\n", encoding="utf-8")
            config = resolve_config(str(path), {"seed": "7", "epochs": None})
        self.assertEqual((config.seed, config.epochs, config.batch_size), (7, 3, 64))

    @override_settings(TRAIN_CONFIG={"epochs": 9})
    def test_settings_provide_defaults(self):
        """Test grouped Django settings feed the defaults"""
        self.assertEqual(resolve_config().epochs, 9)

    def test_invalid_values(self):
        """Test validation errors name the offending key"""
        with self.assertRaises(ConfigError) as ctx:
            resolve_config(None, {"width_divisor": "3"})
        self.assertIn("width_divisor", ctx.exception.errors)
        with self.assertRaises(ConfigError):
            resolve_config(None, {"pyramid_factor": "1.5"})

    def test_malformed_text(self):
        """Test unknown keys and lines without '=' are rejected"""
        with self.assertRaises(ConfigError):
            parse_config("bogus=1\n")
        with self.assertRaises(ConfigError):
            parse_config("seed\n")


class CommandTests(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)
        self.data = self.tmp / "data"
        make_class_tree(self.data)

    def options(self, out, **extra):
        return {
            'dataset_root': str(self.data),
            'output_dir': str(out),
            'width_divisor': 16,
            'epochs': 1,
            'batch_size': 8,
            'seed': 3,
            'stdout': StringIO(),
            **extra,
        }

    def files(self, out):
        return sorted(p.relative_to(out).as_posix() for p in Path(out).rglob('*') if p.is_file())

    def run_pipeline(self, out):
        call_command('prepare', **self.options(out))
        call_command('train', **self.options(out))
        call_command('predict', **self.options(out, split='all'))
        call_command('evaluate', **self.options(out))

    def test_pipeline_is_reproducible(self):
        """Test two seeded runs write byte-identical artifacts"""
        first, second = self.tmp / "run1", self.tmp / "run2"
        self.run_pipeline(first)
        self.run_pipeline(second)
        for name in ("manifest.tsv", "train_log.tsv", "head.cage", "predictions.tsv", "report.tsv"):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), name)
        self.assertEqual(len((first / "predictions.tsv").read_text().splitlines()), 16)
        self.assertEqual(len((first / "train_log.tsv").read_text().splitlines()), 1)

    @mock.patch('estimator.management.commands.detect.load_detector')
    def test_detect_writes_one_chip(self, mock_load):
        """Test one detected face gives one chip and one log line"""
        mock_load.return_value = StubNets()
        images = self.tmp / "faces"
        write_png(images / "25-32" / "face.png", np.full((20, 20, 3), 128))
        out = self.tmp / "detect"
        call_command('detect', **self.options(out, input_dir=str(images), detector_weights='mtcnn.cage'))
        lines = (out / "detections.txt").read_text().splitlines()
        self.assertEqual(len(lines), 1)
        self.assertTrue(lines[0].startswith("25-32/face.png "))
        with Image.open(out / "chips" / "25-32" / "face_png_face0.png") as chip:
            self.assertEqual(chip.size, (256, 256))

    def test_prepare_writes_manifest_and_distribution(self):
        """Test prepare indexes every image and records the split table"""
        out = self.tmp / "prep"
        call_command('prepare', **self.options(out))
        self.assertEqual(len((out / "manifest.tsv").read_text().splitlines()), 16)
        self.assertIn("60+", (out / "class_distribution.txt").read_text())
        self.assertIn("seed=3\n", (out / "config.txt").read_text())

    def test_config_file_option(self):
        """Test --config values apply unless overridden"""
        cfg = self.tmp / "run.txt"
        cfg.write_text("split_ratio=0.5\nseed=11\n", encoding="utf-8")
        out = self.tmp / "cfg"
        options = self.options(out, config=str(cfg))
        del options['seed']
        call_command('prepare', **options)
        written = (out / "config.txt").read_text()
        self.assertIn("seed=11\n", written)
        self.assertIn("split_ratio=0.5\n", written)

    def test_zero_epochs_saves_initial_head(self):
        """Test epochs=0 writes the seeded initialization unchanged"""
        out = self.tmp / "zero"
        call_command('prepare', **self.options(out))
        call_command('train', **self.options(out, epochs=0))
        model = build_model(width_divisor=16)
        expected = init_weights(model.head, np.random.default_rng([3, 2]))
        saved = load_weights(out / "head.cage", model.head)
        for name, tensor in expected.items():
            np.testing.assert_array_equal(saved[name], tensor)
        self.assertEqual((out / "train_log.tsv").read_text(), "")

    def test_evaluate_perfect_predictions(self):
        """Test a prediction log matching the manifest scores 1.0"""
        out = self.tmp / "eval"
        call_command('prepare', **self.options(out))
        lines = []
        for line in (out / "manifest.tsv").read_text().splitlines():
            path, label, _ = line.split("\t")
            probs = ["1.000000" if other == label else "0.000000" for other in AGE_LABELS]
            lines.append("\t".join([path, label, *probs]))
        (out / "predictions.tsv").write_text("\n".join(lines) + "\n")
        call_command('evaluate', **self.options(out))
        report = (out / "report.tsv").read_text().splitlines()
        self.assertIn("exact_accuracy\t1.0", report)
        self.assertIn("one_off_accuracy\t1.0", report)

    def test_invalid_config_is_usage_error(self):
        """Test a bad value exits with status 1 and writes nothing"""
        out = self.tmp / "bad"
        with self.assertRaises(CommandError) as ctx:
            call_command('prepare', **self.options(out, width_divisor=3))
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertFalse(out.exists())

    def test_bad_argument_is_usage_error(self):
        """Test argparse failures use status 1"""
        parser = PredictCommand().create_parser('manage.py', 'predict')
        with self.assertRaises(CommandError) as ctx:
            parser.parse_args(['--split', 'bogus'])
        self.assertEqual(ctx.exception.returncode, 1)

    def test_missing_manifest_removes_partial_outputs(self):
        """Test a data error exits with status 2 and leaves no files behind"""
        out = self.tmp / "missing"
        with self.assertRaises(CommandError) as ctx:
            call_command('train', **self.options(out))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertEqual(self.files(out), [])

    def test_missing_detector_weights(self):
        """Test detect without weights is a data error"""
        out = self.tmp / "nodetector"
        with self.assertRaises(CommandError) as ctx:
            call_command('detect', **self.options(out))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertEqual(self.files(out), [])

    @mock.patch('estimator.management.commands.train.train')
    def test_numeric_failure_exit_code(self, mock_train):
        """Test a diverged run exits with status 3 and keeps earlier artifacts"""
        mock_train.side_effect = NumericError("loss became nan in epoch 1")
        out = self.tmp / "nan"
        call_command('prepare', **self.options(out))
        with self.assertRaises(CommandError) as ctx:
            call_command('train', **self.options(out))
        self.assertEqual(ctx.exception.returncode, 3)
        self.assertEqual(self.files(out), ["class_distribution.txt", "config.txt", "manifest.tsv"])
