"""
Atomic artifact output for the pipeline commands.

Every file goes to a temporary sibling first and is renamed into place, so a
reader never sees a half-written artifact. When the block fails, every file
the writer created is removed again; files it replaced keep their new,
complete contents.
"""
import logging
import os
import tempfile
from pathlib import Path
from typing import List

from .imaging import save_image
from .tensor_ops import Tensor

logger = logging.getLogger(__name__)


class ArtifactWriter:
    """
    Usage:
        with ArtifactWriter(output_dir) as out:
            out.write_text("predictions.txt", text)
    """

    def __init__(self, root):
        self.root = Path(root)
        self.created: List[Path] = []

    def __enter__(self) -> "ArtifactWriter":
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            self.discard()
        return False

    def path(self, relative) -> Path:
        return self.root / relative

    def _commit(self, relative, write) -> Path:
        target = self.path(relative)
        existed = target.exists()
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
        os.close(fd)
        try:
            write(Path(tmp))
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
        if not existed and target not in self.created:
            self.created.append(target)
        return target

    def write_text(self, relative, text: str) -> Path:
        return self._commit(relative, lambda tmp: tmp.write_text(text, encoding="utf-8"))

    def write_bytes(self, relative, data: bytes) -> Path:
        return self._commit(relative, lambda tmp: tmp.write_bytes(data))

    def write_image(self, relative, image: Tensor) -> Path:
        # Pillow picks the codec from the suffix, so keep it on the temp name
        target = self.path(relative)

        def write(tmp: Path):
            staged = tmp.with_suffix(target.suffix)
            save_image(image, staged)
            os.replace(staged, tmp)

        return self._commit(relative, write)

    def discard(self) -> None:
        for path in reversed(self.created):
            try:
                path.unlink()
            except FileNotFoundError:
                pass
        if self.created:
            logger.warning(f"Removed {len(self.created)} partial artifacts under {self.root}")
        self.created = []
