"""Phase-locked capabilities and cryptographic tree anchoring.

The read/write/execute capabilities over the source and test trees are a pure
function of the current phase, and at most one tree is ever writable.  The
locked tree is anchored by a content digest at phase entry, so any
out-of-phase mutation is detectable afterwards no matter how it happened.

Enforcement is two-layer: best-effort OS permission bits on the locked tree,
plus the mandatory digest re-check.  The digest layer is the sound one.
"""

from __future__ import annotations

import fnmatch
import hashlib
import os
import stat
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path, PurePosixPath
from typing import Optional

from .errors import PatchlockError


class IOFailure(PatchlockError):
    """A tree root could not be read."""


class SymlinkEscape(PatchlockError):
    """A symlink inside an anchored tree points outside the tree."""


class IllegalTransition(PatchlockError):
    """The requested phase change is not an edge of the transition graph."""


class Phase(Enum):
    LOGIC_GENESIS = "LogicGenesis"
    TEST_GENESIS = "TestGenesis"
    VERIFY = "Verify"
    DEPLOY = "Deploy"
    HALTED = "Halted"


class PhaseEvent(Enum):
    ENTER_LOGIC_GENESIS = "EnterLogicGenesis"
    ENTER_TEST_GENESIS = "EnterTestGenesis"
    ENTER_VERIFY = "EnterVerify"
    ENTER_DEPLOY = "EnterDeploy"
    HALT = "Halt"


@dataclass(frozen=True)
class CapabilitySet:
    read: bool = False
    write: bool = False
    execute: bool = False

    def __post_init__(self):
        if self.write and not self.read:
            raise ValueError("a writable tree must also be readable")


@dataclass(frozen=True)
class CapabilityMap:
    source: CapabilitySet
    tests: CapabilitySet

    def __post_init__(self):
        if self.source.write and self.tests.write:
            raise ValueError("source and tests must never be writable together")


_CAPABILITIES = {
    Phase.LOGIC_GENESIS: CapabilityMap(
        source=CapabilitySet(read=True, write=True),
        tests=CapabilitySet(read=True, execute=True),
    ),
    Phase.TEST_GENESIS: CapabilityMap(
        source=CapabilitySet(read=True, execute=True),
        tests=CapabilitySet(read=True, write=True),
    ),
    Phase.VERIFY: CapabilityMap(
        source=CapabilitySet(read=True, execute=True),
        tests=CapabilitySet(read=True, execute=True),
    ),
    Phase.DEPLOY: CapabilityMap(
        source=CapabilitySet(read=True, execute=True),
        tests=CapabilitySet(read=True, execute=True),
    ),
    Phase.HALTED: CapabilityMap(
        source=CapabilitySet(read=True),
        tests=CapabilitySet(read=True),
    ),
}


def capabilities_for(phase: Phase) -> CapabilityMap:
    """Capability map granted in ``phase``.  Total over all phases."""
    return _CAPABILITIES[phase]


# Paths that are not part of a tree's semantics.  Matched against every
# path segment and against the full relative path.
DEFAULT_EXCLUDES = (
    ".git",
    ".hg",
    ".svn",
    "__pycache__",
    ".pytest_cache",
    ".mypy_cache",
    ".ruff_cache",
    "*.pyc",
    "*.pyo",
    ".coverage",
    ".DS_Store",
)


@dataclass(frozen=True)
class ManifestRules:
    """Include/exclude globs controlling which files a tree manifest covers."""

    include: tuple[str, ...] = ()
    exclude: tuple[str, ...] = DEFAULT_EXCLUDES

    def admits(self, rel_posix: str) -> bool:
        parts = PurePosixPath(rel_posix).parts
        for pattern in self.exclude:
            if fnmatch.fnmatchcase(rel_posix, pattern):
                return False
            if any(fnmatch.fnmatchcase(part, pattern) for part in parts):
                return False
        if self.include:
            return any(fnmatch.fnmatchcase(rel_posix, p) for p in self.include)
        return True


@dataclass(frozen=True)
class TreeDigest:
    """Content digest of a canonicalized tree manifest.

    The manifest is one line per file, ``relative_path\\0content_digest\\n``,
    paths sorted bytewise; the tree digest is SHA-256 over the whole manifest,
    serialized as lowercase hex.  ``entries`` retains the manifest so a later
    verification can name exactly which paths drifted.
    """

    digest: str
    file_count: int
    root_label: str
    entries: tuple[tuple[str, str], ...] = field(default=(), compare=False, repr=False)


@dataclass(frozen=True)
class Verdict:
    """Outcome of re-checking a tree against its anchor."""

    intact: bool
    added: tuple[str, ...] = ()
    removed: tuple[str, ...] = ()
    modified: tuple[str, ...] = ()

    @property
    def offending_paths(self) -> tuple[str, ...]:
        return tuple(sorted((*self.added, *self.removed, *self.modified)))


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_entries(root: Path, rules: ManifestRules) -> list[tuple[str, str]]:
    entries: list[tuple[str, str]] = []
    root = Path(root)
    if not root.is_dir():
        raise IOFailure(f"tree root is not a readable directory: {root}")
    try:
        walker = os.walk(root, followlinks=False)
        for dirpath, dirnames, filenames in walker:
            rel_dir = Path(dirpath).relative_to(root).as_posix()
            # Prune excluded directories early.
            dirnames[:] = sorted(
                d
                for d in dirnames
                if rules.admits(d if rel_dir == "." else f"{rel_dir}/{d}")
            )
            for name in filenames:
                rel = name if rel_dir == "." else f"{rel_dir}/{name}"
                if not rules.admits(rel):
                    continue
                full = Path(dirpath) / name
                if full.is_symlink():
                    target = os.readlink(full)
                    if os.path.isabs(target):
                        raise SymlinkEscape(f"{rel} -> {target}")
                    resolved = os.path.normpath(os.path.join(os.path.dirname(rel), target))
                    if resolved.startswith(".."):
                        raise SymlinkEscape(f"{rel} -> {target}")
                    # Hash the link target string itself; never follow.
                    digest = hashlib.sha256(target.encode()).hexdigest()
                elif full.is_file():
                    digest = _file_digest(full)
                else:
                    continue  # sockets, fifos, etc. carry no tree semantics
                entries.append((rel, digest))
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    entries.sort(key=lambda e: e[0].encode())
    return entries


def snapshot_tree(
    root_path: Path | str,
    rules: ManifestRules = ManifestRules(),
    root_label: Optional[str] = None,
) -> TreeDigest:
    """Anchor a tree: digest of its canonical manifest, mtime-insensitive."""
    root = Path(root_path)
    entries = _manifest_entries(root, rules)
    manifest = b"".join(f"{rel}\0{digest}\n".encode() for rel, digest in entries)
    return TreeDigest(
        digest=hashlib.sha256(manifest).hexdigest(),
        file_count=len(entries),
        root_label=root_label or root.name,
        entries=tuple(entries),
    )


def verify_anchor(
    root_path: Path | str,
    anchor: TreeDigest,
    rules: ManifestRules = ManifestRules(),
) -> Verdict:
    """Re-snapshot ``root_path`` and compare against ``anchor``.

    Returns an intact verdict iff the fresh digest equals the anchor digest;
    otherwise names every added, removed, and modified relative path.
    """
    fresh = snapshot_tree(root_path, rules, anchor.root_label)
    if fresh.digest == anchor.digest:
        return Verdict(intact=True)
    old = dict(anchor.entries)
    new = dict(fresh.entries)
    added = tuple(sorted(set(new) - set(old)))
    removed = tuple(sorted(set(old) - set(new)))
    modified = tuple(sorted(p for p in set(old) & set(new) if old[p] != new[p]))
    return Verdict(intact=False, added=added, removed=removed, modified=modified)


@dataclass(frozen=True)
class LockState:
    """Full lock state: phase, the capability map it implies, and anchors."""

    phase: Phase
    caps: CapabilityMap
    anchor_source: Optional[TreeDigest] = None
    anchor_tests: Optional[TreeDigest] = None

    def __post_init__(self):
        if self.caps != capabilities_for(self.phase):
            raise ValueError("capability map must match the phase")
        if self.phase is Phase.LOGIC_GENESIS and self.anchor_tests is None:
            raise ValueError("LogicGenesis requires a tests anchor")
        if self.phase is Phase.TEST_GENESIS and self.anchor_source is None:
            raise ValueError("TestGenesis requires a source anchor")

    @classmethod
    def initial(cls) -> "LockState":
        return cls(phase=Phase.HALTED, caps=capabilities_for(Phase.HALTED))


_TRANSITIONS: dict[tuple[Phase, PhaseEvent], Phase] = {
    (Phase.HALTED, PhaseEvent.ENTER_LOGIC_GENESIS): Phase.LOGIC_GENESIS,
    (Phase.HALTED, PhaseEvent.ENTER_TEST_GENESIS): Phase.TEST_GENESIS,
    (Phase.LOGIC_GENESIS, PhaseEvent.ENTER_VERIFY): Phase.VERIFY,
    (Phase.LOGIC_GENESIS, PhaseEvent.HALT): Phase.HALTED,
    (Phase.TEST_GENESIS, PhaseEvent.ENTER_VERIFY): Phase.VERIFY,
    (Phase.TEST_GENESIS, PhaseEvent.HALT): Phase.HALTED,
    (Phase.VERIFY, PhaseEvent.ENTER_DEPLOY): Phase.DEPLOY,
    (Phase.VERIFY, PhaseEvent.ENTER_LOGIC_GENESIS): Phase.LOGIC_GENESIS,
    (Phase.VERIFY, PhaseEvent.ENTER_TEST_GENESIS): Phase.TEST_GENESIS,
    (Phase.VERIFY, PhaseEvent.HALT): Phase.HALTED,
    (Phase.DEPLOY, PhaseEvent.ENTER_LOGIC_GENESIS): Phase.LOGIC_GENESIS,
    (Phase.DEPLOY, PhaseEvent.ENTER_TEST_GENESIS): Phase.TEST_GENESIS,
    (Phase.DEPLOY, PhaseEvent.HALT): Phase.HALTED,
}


def transition(
    state: LockState,
    event: PhaseEvent,
    source_root: Path | str,
    tests_root: Path | str,
    rules: ManifestRules = ManifestRules(),
) -> LockState:
    """Apply a phase event, anchoring the locked tree on Genesis entry.

    Entering LogicGenesis snapshots the tests tree; entering TestGenesis
    snapshots the source tree.  Leaving a Genesis phase does not itself
    verify the anchor: the caller must check ``verify_anchor`` before
    treating the cycle as committed.
    """
    new_phase = _TRANSITIONS.get((state.phase, event))
    if new_phase is None:
        raise IllegalTransition(f"{state.phase.value} cannot accept {event.value}")
    anchor_source = state.anchor_source
    anchor_tests = state.anchor_tests
    if new_phase is Phase.LOGIC_GENESIS:
        anchor_tests = snapshot_tree(tests_root, rules, "tests")
    elif new_phase is Phase.TEST_GENESIS:
        anchor_source = snapshot_tree(source_root, rules, "source")
    return LockState(
        phase=new_phase,
        caps=capabilities_for(new_phase),
        anchor_source=anchor_source,
        anchor_tests=anchor_tests,
    )


def set_tree_writable(root: Path | str, writable: bool) -> None:
    """Best-effort permission layer: toggle owner write bits on a whole tree.

    Failures are swallowed; the digest check remains the sound enforcement.
    """
    for dirpath, dirnames, filenames in os.walk(root):
        for name in (*dirnames, *filenames):
            full = os.path.join(dirpath, name)
            try:
                mode = os.lstat(full).st_mode
                if stat.S_ISLNK(mode):
                    continue
                if writable:
                    os.chmod(full, mode | stat.S_IWUSR)
                else:
                    os.chmod(full, mode & ~(stat.S_IWUSR | stat.S_IWGRP | stat.S_IWOTH))
            except OSError:
                pass
