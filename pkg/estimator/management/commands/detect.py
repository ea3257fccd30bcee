from pathlib import Path

from estimator.cascade.chips import detect_directory
from estimator.cascade.networks import load_detector
from estimator.exceptions import MissingArtifactError

from ._base import PipelineCommand

DETECTIONS_FILE = "detections.txt"


class Command(PipelineCommand):
    help = "Detect faces with the three-stage cascade; write face chips and the detection log"

    def add_command_arguments(self, parser):
        parser.add_argument('--input-dir', dest='input_dir', help='Images to scan (default: dataset_root)')

    def run(self, config, out, **options):
        input_dir = Path(options.get('input_dir') or config.dataset_root)
        if not input_dir.is_dir():
            raise MissingArtifactError(f"Input directory {input_dir} does not exist")
        nets = load_detector(config.detector_weights)
        lines, summary = detect_directory(input_dir, out, nets, config)
        out.write_text(DETECTIONS_FILE, "".join(line + "\n" for line in lines))
        self.stdout.write(self.style.SUCCESS(
            f"Detected {summary.faces} faces in {summary.images} images; chips under {out.path('chips')}"
        ))
