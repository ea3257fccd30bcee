from pathlib import Path

from estimator.dataset import read_manifest
from estimator.evaluation import evaluate, render_report, render_tsv
from estimator.exceptions import DataError, MissingArtifactError
from estimator.inference import loads_predictions

from ._base import MANIFEST_FILE, PREDICTIONS_FILE, PipelineCommand

REPORT_FILE = "report.txt"
REPORT_TSV_FILE = "report.tsv"


class Command(PipelineCommand):
    help = "Exact and 1-off accuracy, normalized confusion matrix and classification report"

    def add_command_arguments(self, parser):
        parser.add_argument('--predictions', help=f'Prediction log (default: <output_dir>/{PREDICTIONS_FILE})')
        parser.add_argument('--manifest', help=f'Manifest with true labels (default: <output_dir>/{MANIFEST_FILE})')
        parser.add_argument('--top-errors', dest='top_errors', type=int, default=10,
                            help='How many confident misclassifications to list')

    def run(self, config, out, **options):
        predictions_path = Path(options.get('predictions') or out.path(PREDICTIONS_FILE))
        if not predictions_path.is_file():
            raise MissingArtifactError(f"Prediction log {predictions_path} does not exist; run `predict` first")
        predictions = loads_predictions(predictions_path.read_text(encoding="utf-8"), str(predictions_path))
        manifest = read_manifest(options.get('manifest') or out.path(MANIFEST_FILE))
        truth = manifest.labels_by_path()

        rows = []
        for p in predictions:
            if p.path not in truth:
                raise DataError(f"{p.path} is not in the manifest; cannot look up its true label")
            rows.append((p.path, int(truth[p.path]), int(p.predicted), p.confidence))

        report = evaluate(rows, manifest.counts(), options.get('top_errors', 10))
        text = render_report(report)
        out.write_text(REPORT_FILE, text)
        out.write_text(REPORT_TSV_FILE, render_tsv(report))
        self.stdout.write(text)
        self.stdout.write(self.style.SUCCESS(f"Report written to {out.path(REPORT_FILE)}"))
