import csv
import logging
from pathlib import Path
from typing import Any, Iterable, List, Sequence, Union

logger = logging.getLogger(__name__)


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """UTF-8, '\\n' line endings; floats keep their shortest round-tripping repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open('w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(value)) if isinstance(value, float) else value for value in row])
            count += 1
    logger.debug('Wrote %d rows to %s', count, path)
    return path


def read_csv(path: Union[str, Path]) -> List[dict]:
    with Path(path).open(encoding='utf-8', newline='') as f:
        return list(csv.DictReader(f))


def read_rows(path: Union[str, Path]) -> List[List[str]]:
    """Header-less access for ragged tables."""
    with Path(path).open(encoding='utf-8', newline='') as f:
        return list(csv.reader(f))[1:]
