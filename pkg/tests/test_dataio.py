import json

import numpy as np
import pytest

from visact.models.errors import EpisodeFormatError
from visact.skills.dataio import (
    EpisodeCache,
    InMemoryDataset,
    build_index,
    episode_dir,
    iterate_batches,
    load_episode,
    load_index,
    save_episode,
    save_index,
    scan_corpus,
)


@pytest.fixture
def corpus(tmp_path, episodes, heldout_episodes):
    for ep in episodes + heldout_episodes:
        save_episode(ep, episode_dir(tmp_path, ep.episode_id))
    save_index(build_index(tmp_path))
    return tmp_path


def test_episode_directory_round_trip(episodes, tmp_path):
    ep = episodes[0]
    path = save_episode(ep, tmp_path / "ep_x")
    assert sorted(p.name for p in path.iterdir()) == [
        "action.json", "goal.png", "instruction.txt", "meta.json", "start.png",
    ]
    loaded = load_episode(path)
    assert loaded.instruction == ep.instruction
    assert loaded.action == ep.action
    assert loaded.meta == ep.meta
    # 8-bit PNG quantization only
    np.testing.assert_allclose(loaded.start_image, ep.start_image, atol=0.5 / 255.0 + 1e-6)


def test_action_file_is_optional(episodes, tmp_path):
    path = save_episode(episodes[0], tmp_path / "ep_x")
    (path / "action.json").unlink()
    assert load_episode(path).action is None


def test_missing_file_is_named(episodes, tmp_path):
    path = save_episode(episodes[0], tmp_path / "ep_x")
    (path / "goal.png").unlink()
    with pytest.raises(EpisodeFormatError, match="goal.png"):
        load_episode(path)


def test_malformed_meta_is_rejected(episodes, tmp_path):
    path = save_episode(episodes[0], tmp_path / "ep_x")
    (path / "meta.json").write_text("{not json", encoding="utf-8")
    with pytest.raises(EpisodeFormatError):
        load_episode(path)


def test_index_file_layout(corpus, episodes):
    data = json.loads((corpus / "index.json").read_text(encoding="utf-8"))
    ids = {e["id"] for e in data["episodes"]}
    assert {ep.episode_id for ep in episodes} <= ids
    assert all({"id", "split", "task"} <= set(e) for e in data["episodes"])


def test_split_filter(corpus):
    index = load_index(corpus)
    assert index.available_splits() == ["inter", "intra", "train"]
    train = load_index(corpus, split="train")
    assert len(train) == 6
    assert all(train.get(i).meta.split == "train" for i in train.ids)
    assert len(load_index(corpus, split="train", task="packing_grp")) == 3


def test_missing_split_lists_available(episodes, tmp_path_factory):
    only_train = tmp_path_factory.mktemp("train_only")
    for ep in episodes:
        save_episode(ep, episode_dir(only_train, ep.episode_id))
    with pytest.raises(ValueError, match="available"):
        load_index(only_train, split="inter")


def test_batches_are_seeded(dataset):
    first = [[e.episode_id for e in b] for b in iterate_batches(dataset, 4, seed=1)]
    again = [[e.episode_id for e in b] for b in iterate_batches(dataset, 4, seed=1)]
    assert first == again
    assert [len(b) for b in first] == [4, 2]
    assert sorted(i for b in first for i in b) == sorted(dataset.ids)


def test_batches_reject_empty_and_bad_size(dataset):
    with pytest.raises(ValueError):
        next(iterate_batches(InMemoryDataset([]), 2, seed=0))
    with pytest.raises(ValueError):
        next(iterate_batches(dataset, 0, seed=0))


def test_scan_corpus_reports_problems(corpus, episodes):
    assert scan_corpus(corpus)["is_valid"]
    (episode_dir(corpus, episodes[0].episode_id) / "start.png").unlink()
    report = scan_corpus(corpus)
    assert not report["is_valid"]
    assert any("start.png" in issue for issue in report["issues"])


def test_episode_cache_evicts_least_recently_used(episodes):
    cache = EpisodeCache(maxsize=2)
    loads = []

    def loader(ep):
        def load():
            loads.append(ep.episode_id)
            return ep
        return load

    a, b, c = episodes[:3]
    cache.get(a.episode_id, loader(a))
    cache.get(b.episode_id, loader(b))
    cache.get(a.episode_id, loader(a))
    cache.get(c.episode_id, loader(c))
    assert len(cache) == 2
    assert a.episode_id in cache and c.episode_id in cache
    assert b.episode_id not in cache
    assert loads == [a.episode_id, b.episode_id, c.episode_id]


def test_index_cache_stays_bounded(corpus, monkeypatch):
    monkeypatch.setenv("VISACT_EPISODE_CACHE", "3")
    index = load_index(corpus)
    for _ in range(2):
        for episode_id in index.ids:
            assert index.get(episode_id).episode_id == episode_id
            assert len(index._cache) <= 3
    assert len(index) == 8


def test_in_memory_episodes_are_never_evicted(episodes, monkeypatch):
    monkeypatch.setenv("VISACT_EPISODE_CACHE", "1")
    train = InMemoryDataset(episodes).filter(split="train")
    assert [e.episode_id for e in train.episodes()] == [e.episode_id for e in episodes]
    with pytest.raises(KeyError):
        InMemoryDataset(episodes).get("absent")
