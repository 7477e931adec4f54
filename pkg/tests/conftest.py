import time
from dataclasses import dataclass, field

import pytest

from malafide.attack import default_attack_config, optimize_filter
from malafide.data import generate_corpus, split_partition
from malafide.detector import ARCHITECTURES, default_train_config, train_detector

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@dataclass
class DefaultSetup:
    corpus: object
    partition: object
    detectors: dict
    checkpoints: dict
    train_seconds: dict
    bona1: object = None
    spoofs1: dict = None
    bona2: object = None
    spoofs2: dict = None
    attacks: dict = field(default_factory=dict)  # (arch, attack, L) -> (filter, log, seconds)


@pytest.fixture(scope="session")
def default_setup():
    """Default corpus (seed 0, 200 faces, 64x64) with both detectors trained at their defaults."""
    corpus = generate_corpus(0)
    partition = split_partition(corpus, 0.7, 0)
    dets, ckpts, secs = {}, {}, {}
    for arch in ARCHITECTURES:
        t = time.perf_counter()
        dets[arch] = train_detector(corpus, partition, arch, default_train_config(arch))
        secs[arch] = time.perf_counter() - t
        ckpts[arch] = dets[arch].serialize()
    s = DefaultSetup(corpus, partition, dets, ckpts, secs)
    s.bona1, s.spoofs1 = corpus.select(partition.part1)
    s.bona2, s.spoofs2 = corpus.select(partition.part2)
    return s


def attack_run(setup: DefaultSetup, arch: str, attack: str, L: int):
    """Optimise (once per session) the filter for one (detector, attack, size) cell."""
    key = (arch, attack, L)
    if key not in setup.attacks:
        t = time.perf_counter()
        filt, log = optimize_filter(
            setup.spoofs1[attack], setup.bona1, setup.detectors[arch], L, default_attack_config(arch, L), attack_id=attack
        )
        setup.attacks[key] = (filt, log, time.perf_counter() - t)
    return setup.attacks[key]
