from estimator.dataset import dumps_manifest, ingest, split
from estimator.evaluation import render_distribution

from ._base import MANIFEST_FILE, PipelineCommand

DISTRIBUTION_FILE = "class_distribution.txt"


class Command(PipelineCommand):
    help = "Index the class directories under dataset_root and split them 80-20 per class"

    def run(self, config, out, **options):
        manifest = split(ingest(config.dataset_root), config.split_ratio, config.seed)
        out.write_text(MANIFEST_FILE, dumps_manifest(manifest))
        table = render_distribution(manifest.counts())
        out.write_text(DISTRIBUTION_FILE, table)
        self.stdout.write(table)
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(manifest)} samples to {out.path(MANIFEST_FILE)}"))
