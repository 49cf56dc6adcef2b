"""
Data IO Skill - episode directories, dataset index and seeded batching.

Layout of one episode directory `ep_<id>/`:

    start.png        8-bit RGB
    goal.png         8-bit RGB
    instruction.txt  UTF-8, one line
    action.json      {"pick": [u, v, theta], "place": [u, v, theta]}  (optional)
    meta.json        EpisodeMeta

The dataset root holds `index.json` ({"episodes": [{"id", "split", "task"}]}).
"""

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
from PIL import Image
from pydantic import ValidationError

from visact.models.errors import EpisodeFormatError
from visact.models.schemas import Episode, EpisodeMeta, SE2Action
from visact.skills.validation_skill import validate_episode
from visact.utils.settings import get_settings

logger = logging.getLogger(__name__)

INDEX_FILE = "index.json"
REQUIRED_FILES = ("start.png", "goal.png", "instruction.txt", "meta.json")


def episode_dir(root: Union[str, Path], episode_id: str) -> Path:
    return Path(root) / f"ep_{episode_id}"


def _dump_json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def _to_uint8(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.round(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


# =============================================================================
# EPISODE FILES
# =============================================================================

def save_episode(episode: Episode, path: Union[str, Path]) -> Path:
    """
    Write an episode directory.

    Args:
        episode: Episode with images in [0, 1].
        path: Target directory (created if missing).

    Returns:
        The directory path.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(episode.start_image)).save(path / "start.png", format="PNG")
    Image.fromarray(_to_uint8(episode.goal_image)).save(path / "goal.png", format="PNG")
    (path / "instruction.txt").write_text(episode.instruction.rstrip() + "\n", encoding="utf-8")
    if episode.action is not None:
        (path / "action.json").write_text(_dump_json(episode.action.to_json_dict()), encoding="utf-8")
    (path / "meta.json").write_text(_dump_json(episode.meta.model_dump(mode="json")), encoding="utf-8")
    return path


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise EpisodeFormatError(f"{path}: unreadable image ({e})") from e
    return arr.astype(np.float32) / 255.0


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise EpisodeFormatError(f"{path}: malformed JSON ({e})") from e


def load_episode(path: Union[str, Path]) -> Episode:
    """
    Read an episode directory.

    Raises:
        EpisodeFormatError: missing file (named), start/goal shape mismatch or
            malformed JSON.
    """
    path = Path(path)
    for name in REQUIRED_FILES:
        if not (path / name).is_file():
            raise EpisodeFormatError(f"{path}: missing required file {name}")

    start = _read_png(path / "start.png")
    goal = _read_png(path / "goal.png")
    if start.shape != goal.shape:
        raise EpisodeFormatError(f"{path}: start {start.shape} and goal {goal.shape} shapes differ")

    try:
        meta = EpisodeMeta.model_validate(_read_json(path / "meta.json"))
        action = None
        if (path / "action.json").is_file():
            action = SE2Action.from_json_dict(_read_json(path / "action.json"))
    except (ValidationError, KeyError, IndexError, TypeError) as e:
        raise EpisodeFormatError(f"{path}: invalid annotation ({e})") from e

    episode_id = path.name[3:] if path.name.startswith("ep_") else path.name
    return Episode(
        episode_id=episode_id,
        start_image=start,
        goal_image=goal,
        instruction=(path / "instruction.txt").read_text(encoding="utf-8").rstrip(),
        meta=meta,
        action=action,
    )


# =============================================================================
# INDEX
# =============================================================================

class EpisodeCache:
    """
    Least-recently-used store of loaded episodes, at most `maxsize` entries.

    Pinned episodes (an in-memory dataset) are held outside the LRU and never
    evicted.
    """

    def __init__(self, maxsize: Optional[int] = None, pinned: Optional[Dict[str, Episode]] = None):
        self.maxsize = get_settings().episode_cache_size if maxsize is None else maxsize
        if self.maxsize < 0:
            raise ValueError(f"cache size must be >= 0, got {self.maxsize}")
        self._pinned: Dict[str, Episode] = dict(pinned or {})
        self._recent: "OrderedDict[str, Episode]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._pinned) + len(self._recent)

    def __contains__(self, episode_id: str) -> bool:
        return episode_id in self._pinned or episode_id in self._recent

    def get(self, episode_id: str, load: Callable[[], Episode]) -> Episode:
        if episode_id in self._pinned:
            return self._pinned[episode_id]
        if episode_id in self._recent:
            self._recent.move_to_end(episode_id)
            return self._recent[episode_id]
        episode = load()
        if self.maxsize > 0:
            self._recent[episode_id] = episode
            while len(self._recent) > self.maxsize:
                self._recent.popitem(last=False)
        return episode


@dataclass
class DatasetIndex:
    """
    Episode ids under a root, optionally filtered to one split.

    Episodes are loaded lazily into a bounded EpisodeCache shared with every
    sub-index; the index never writes to disk except through save_index.
    """
    root: Path
    ids: List[str]
    splits: Dict[str, str]
    tasks: Dict[str, str] = field(default_factory=dict)
    split_filter: Optional[str] = None
    _cache: EpisodeCache = field(default_factory=EpisodeCache, repr=False)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("dataset index ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    def get(self, episode_id: str) -> Episode:
        return self._cache.get(episode_id, lambda: load_episode(episode_dir(self.root, episode_id)))

    def episodes(self) -> List[Episode]:
        return [self.get(i) for i in self.ids]

    def available_splits(self) -> List[str]:
        return sorted(set(self.splits.values()))

    def filter(self, split: Optional[str] = None, task: Optional[str] = None) -> "DatasetIndex":
        """
        Sub-index restricted to a split and/or task.

        Raises:
            ValueError: if the split is absent, listing the available ones.
        """
        if split is not None and split not in self.splits.values():
            raise ValueError(f"split {split!r} not in dataset; available: {self.available_splits()}")
        ids = [
            i for i in self.ids
            if (split is None or self.splits[i] == split) and (task is None or self.tasks.get(i) == task)
        ]
        return DatasetIndex(
            root=self.root,
            ids=ids,
            splits={i: self.splits[i] for i in ids},
            tasks={i: self.tasks[i] for i in ids if i in self.tasks},
            split_filter=split or self.split_filter,
            _cache=self._cache,
        )


class InMemoryDataset(DatasetIndex):
    """Same interface as DatasetIndex over episodes already in memory."""

    def __init__(self, episodes: Sequence[Episode]):
        super().__init__(
            root=Path("."),
            ids=[e.episode_id for e in episodes],
            splits={e.episode_id: e.meta.split for e in episodes},
            tasks={e.episode_id: e.meta.task for e in episodes},
            _cache=EpisodeCache(pinned={e.episode_id: e for e in episodes}),
        )

    def get(self, episode_id: str) -> Episode:
        def missing() -> Episode:
            raise KeyError(f"episode {episode_id!r} is not in this dataset")

        return self._cache.get(episode_id, missing)


def build_index(root: Union[str, Path]) -> DatasetIndex:
    """Scan `ep_*` directories under root (meta.json supplies split and task)."""
    root = Path(root)
    ids, splits, tasks = [], {}, {}
    for d in sorted(root.glob("ep_*")):
        if not d.is_dir():
            continue
        meta_path = d / "meta.json"
        if not meta_path.is_file():
            raise EpisodeFormatError(f"{d}: missing required file meta.json")
        meta = _read_json(meta_path)
        episode_id = d.name[3:]
        ids.append(episode_id)
        splits[episode_id] = meta.get("split", "")
        tasks[episode_id] = meta.get("task", "")
    return DatasetIndex(root=root, ids=ids, splits=splits, tasks=tasks)


def save_index(index: DatasetIndex) -> Path:
    entries = [
        {"id": i, "split": index.splits[i], "task": index.tasks.get(i, "")}
        for i in index.ids
    ]
    path = Path(index.root) / INDEX_FILE
    path.write_text(_dump_json({"episodes": entries}), encoding="utf-8")
    return path


def load_index(root: Union[str, Path], split: Optional[str] = None, task: Optional[str] = None) -> DatasetIndex:
    """
    Read `index.json`; falls back to a directory scan when it is missing.

    Raises:
        ValueError: the requested split is absent.
    """
    root = Path(root)
    path = root / INDEX_FILE
    if path.is_file():
        data = _read_json(path)
        try:
            entries = data["episodes"]
            index = DatasetIndex(
                root=root,
                ids=[e["id"] for e in entries],
                splits={e["id"]: e["split"] for e in entries},
                tasks={e["id"]: e.get("task", "") for e in entries},
            )
        except (KeyError, TypeError) as e:
            raise EpisodeFormatError(f"{path}: malformed index ({e})") from e
    else:
        index = build_index(root)
    if split is None and task is None:
        return index
    return index.filter(split=split, task=task)


# =============================================================================
# BATCHING
# =============================================================================

def shuffled_ids(index: DatasetIndex, seed: int) -> List[str]:
    order = np.random.default_rng(seed).permutation(len(index.ids))
    return [index.ids[i] for i in order]


def iterate_batches(index: DatasetIndex, batch_size: int, seed: int) -> Iterator[List[Episode]]:
    """
    One pass over the seed-shuffled ids; the last batch may be partial.

    Raises:
        ValueError: empty index or batch_size < 1.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if len(index) == 0:
        raise ValueError("cannot iterate an empty dataset index")
    order = shuffled_ids(index, seed)
    for start in range(0, len(order), batch_size):
        yield [index.get(i) for i in order[start:start + batch_size]]


def scan_corpus(root: Union[str, Path]) -> dict:
    """
    Load and validate every indexed episode.

    Returns:
        Dictionary with is_valid, issues and the number of episodes scanned.
    """
    index = load_index(root)
    issues = []
    for episode_id in index.ids:
        try:
            episode = index.get(episode_id)
        except EpisodeFormatError as e:
            issues.append(str(e))
            continue
        if episode.meta.split != index.splits[episode_id]:
            issues.append(f"{episode_id}: meta split {episode.meta.split} != index split {index.splits[episode_id]}")
        result = validate_episode(episode)
        issues.extend(f"{episode_id}: {msg}" for msg in result["issues"])
    return {"is_valid": len(issues) == 0, "issues": issues, "episodes": len(index)}
