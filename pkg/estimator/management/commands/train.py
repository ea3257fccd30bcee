from estimator.augment import Augmenter
from estimator.dataset import read_manifest
from estimator.network import dumps_spec
from estimator.training import TrainConfig, dumps_training_log, train
from estimator.weights import serialize_weights

from ._base import HEAD_FILE, MANIFEST_FILE, PipelineCommand, assemble_model, initial_head

TRAIN_LOG_FILE = "train_log.tsv"
SPEC_FILE = "model.json"


class Command(PipelineCommand):
    help = "Train the classification head on frozen backbone features"

    def add_command_arguments(self, parser):
        parser.add_argument('--manifest', help=f'Manifest to train from (default: <output_dir>/{MANIFEST_FILE})')

    def run(self, config, out, **options):
        manifest = read_manifest(options.get('manifest') or out.path(MANIFEST_FILE))
        model = assemble_model(config)
        head = initial_head(model, config)
        model.weights.update(head)
        out.write_text(SPEC_FILE, dumps_spec(model.spec))

        if config.epochs == 0:
            # nothing to fit: the checkpoint is the initialization
            trained, log = head, []
        else:
            def checkpoint(stats, params):
                if config.checkpoint_every and stats.epoch % config.checkpoint_every == 0:
                    out.write_bytes(f"checkpoints/head_epoch{stats.epoch:03d}.cage",
                                    serialize_weights(params, model.head))
                self.stdout.write(f"epoch {stats.epoch}: loss {stats.loss:.4f} val acc {stats.val_accuracy:.4f}")

            augmenter = Augmenter(flip_probability=config.flip_probability,
                                  rotation_degrees=config.rotation_degrees)
            result = train(model, manifest, TrainConfig.from_pipeline(config), augmenter, checkpoint)
            trained, log = result.weights, result.log

        out.write_bytes(HEAD_FILE, serialize_weights(trained, model.head))
        out.write_text(TRAIN_LOG_FILE, dumps_training_log(log))
        self.stdout.write(self.style.SUCCESS(f"Saved head to {out.path(HEAD_FILE)} after {len(log)} epochs"))
