import logging
from pathlib import Path

from estimator.cascade.chips import extract_face_chip
from estimator.cascade.graph import detect_faces
from estimator.cascade.networks import load_detector
from estimator.dataset import SPLITS, read_manifest
from estimator.imaging import list_images
from estimator.inference import dumps_predictions, predict_batch
from estimator.weights import load_weights, validate_store

from ._base import HEAD_FILE, MANIFEST_FILE, PREDICTIONS_FILE, PipelineCommand, assemble_model

logger = logging.getLogger(__name__)


class Command(PipelineCommand):
    help = "Five-crop age range prediction for a manifest split or a directory of images"

    def add_command_arguments(self, parser):
        parser.add_argument('--input', help=f'Image directory or manifest (default: <output_dir>/{MANIFEST_FILE})')
        parser.add_argument('--split', choices=SPLITS + ('all',), default='val',
                            help='Manifest split to predict (ignored for directories)')
        parser.add_argument('--head', help=f'Head weights (default: <output_dir>/{HEAD_FILE})')

    def run(self, config, out, **options):
        model = assemble_model(config)
        head = load_weights(options.get('head') or out.path(HEAD_FILE), model.head)
        validate_store(head, model.head, require_all=True)
        model.weights.update(head)

        source = Path(options.get('input') or out.path(MANIFEST_FILE))
        if source.is_dir():
            paths = list_images(source)
        else:
            manifest = read_manifest(source)
            split = options.get('split', 'val')
            paths = [s.path for s in manifest.samples if split == 'all' or s.split == split]

        preprocess = None
        if config.detect_on_predict:
            nets = load_detector(config.detector_weights)

            def preprocess(image, path):
                detections = detect_faces(image, nets, config).detections
                if not detections:
                    logger.warning(f"No face found in {path}; predicting on the whole image")
                    return image
                return extract_face_chip(image, detections[0], config.chip_size)

        results = predict_batch(model, paths, preprocess)
        out.write_text(PREDICTIONS_FILE, dumps_predictions(results))
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(results)} predictions to {out.path(PREDICTIONS_FILE)}"))
