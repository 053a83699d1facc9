"""
Run output directory management
"""
import logging
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional, Union

import pandas as pd

from nn import ParameterSet, save_parameters

logger = logging.getLogger(__name__)


class RunStore:
    """Files of one experiment run, laid out under a single root"""

    def __init__(self, root: Union[str, Path]):
        """
        Initialize run store

        Args:
            root: Output directory (created when missing)
        """
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str, seed: Optional[int] = None) -> Path:
        base = self.seed_dir(seed) if seed is not None else self.root
        return base / name

    def seed_dir(self, seed: int) -> Path:
        directory = self.root / f"seed_{seed}"
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    def variant_dir(self, seed: int, variant: str) -> Path:
        directory = self.seed_dir(seed) / variant
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    @contextmanager
    def atomic_path(self, target: Path) -> Iterator[Path]:
        """Yield a temporary path that replaces target only if the block succeeds"""
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
        os.close(fd)
        tmp = Path(tmp_name)
        try:
            yield tmp
            os.replace(tmp, target)
        except Exception:
            tmp.unlink(missing_ok=True)
            raise

    def write_csv(self, frame: pd.DataFrame, name: str, seed: Optional[int] = None) -> Path:
        target = self.path(name, seed)
        with self.atomic_path(target) as tmp:
            frame.to_csv(tmp, index=False, lineterminator="\n")
        logger.debug(f"Wrote {len(frame)} rows to {target}")
        return target

    def write_text(self, name: str, text: str, seed: Optional[int] = None) -> Path:
        target = self.path(name, seed)
        with self.atomic_path(target) as tmp:
            tmp.write_text(text, encoding="utf-8")
        return target

    def save_checkpoint(self, params: ParameterSet, seed: int, variant: str, name: str = "theta_final.bin") -> Path:
        target = self.variant_dir(seed, variant) / name
        with self.atomic_path(target) as tmp:
            save_parameters(params, tmp)
        return target

    def checkpoint_path(self, seed: int, variant: str, name: str = "theta_final.bin") -> Path:
        return self.root / f"seed_{seed}" / variant / name
