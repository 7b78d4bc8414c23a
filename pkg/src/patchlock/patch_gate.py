"""Unified-diff action gate: parse, scope-check, sanitize, apply.

Patches are the only channel through which an agent mutates a workspace.
Everything here fails closed: a patch that cannot be fully parsed, scoped,
sanitized, and applied leaves the tree byte-identical.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path, PurePosixPath
from typing import Iterable, Optional

from .errors import PatchlockError
from .vault import Phase


class PatchParseError(PatchlockError):
    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class PathTraversal(PatchlockError):
    def __init__(self, paths: Iterable[str]):
        self.paths = tuple(paths)
        super().__init__(f"patch targets escape the workspace: {', '.join(self.paths)}")


class ScopeViolation(PatchlockError):
    def __init__(self, paths: Iterable[str], phase: Phase):
        self.paths = tuple(paths)
        self.phase = phase
        super().__init__(
            f"targets outside the writable tree in {phase.value}: {', '.join(self.paths)}"
        )


class NoWritePhase(PatchlockError):
    """Scope was checked in a phase that grants no write capability at all."""


class SanitizeError(PatchlockError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


# --------------------------------------------------------------------------
# Patch structure and parsing

_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")
_NOISE_PREFIXES = ("diff ", "index ", "new file mode", "deleted file mode",
                   "old mode", "new mode")
_UNSUPPORTED_PREFIXES = ("similarity index", "rename from", "rename to",
                         "copy from", "copy to")
_DEV_NULL = "/dev/null"


@dataclass(frozen=True)
class Hunk:
    old_start: int
    old_len: int
    new_start: int
    new_len: int
    lines: tuple[tuple[str, str], ...]  # (tag, text), tag in {" ", "+", "-"}
    no_newline_old: bool = False
    no_newline_new: bool = False

    def old_lines(self) -> list[str]:
        return [text for tag, text in self.lines if tag in (" ", "-")]

    def new_lines(self) -> list[str]:
        return [text for tag, text in self.lines if tag in (" ", "+")]


@dataclass(frozen=True)
class FilePatch:
    target_path: str
    hunks: tuple[Hunk, ...]
    is_creation: bool = False
    is_deletion: bool = False


@dataclass(frozen=True)
class UnifiedPatch:
    files: tuple[FilePatch, ...]

    def target_paths(self) -> tuple[str, ...]:
        return tuple(fp.target_path for fp in self.files)


def _strip_diff_path(raw: str) -> str:
    path = raw.split("\t")[0].strip()
    if path.startswith(("a/", "b/")):
        path = path[2:]
    return path


def _validate_targets(files: list[FilePatch]) -> None:
    bad = []
    for fp in files:
        parts = PurePosixPath(fp.target_path).parts
        if (
            not fp.target_path
            or fp.target_path.startswith("/")
            or ".." in parts
            or parts and parts[0].endswith(":")
        ):
            bad.append(fp.target_path)
    if bad:
        raise PathTraversal(bad)


def parse_patch(text: str) -> UnifiedPatch:
    """Parse unified diff text into its structural form.

    Raises PatchParseError on malformed or empty input, and PathTraversal
    when a structurally valid patch targets paths outside the workspace.
    Binary and rename patches are rejected outright.
    """
    if not text or not text.strip():
        raise PatchParseError("empty patch")
    lines = text.splitlines()
    files: list[FilePatch] = []
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("--- "):
            i, fp = _parse_file_section(lines, i)
            files.append(fp)
        elif line.startswith(_UNSUPPORTED_PREFIXES):
            raise PatchParseError("rename/copy patches are not supported", i + 1)
        elif line.startswith("GIT binary patch") or line.startswith("Binary files"):
            raise PatchParseError("binary patches are rejected", i + 1)
        elif line.startswith(_NOISE_PREFIXES) or not line.strip():
            i += 1
        else:
            raise PatchParseError(f"unexpected content: {line[:60]!r}", i + 1)
    if not files:
        raise PatchParseError("no file sections found", len(lines))
    _validate_targets(files)
    return UnifiedPatch(files=tuple(files))


def _parse_file_section(lines: list[str], i: int) -> tuple[int, FilePatch]:
    old_path = _strip_diff_path(lines[i][4:])
    i += 1
    if i >= len(lines) or not lines[i].startswith("+++ "):
        raise PatchParseError("missing +++ header", i + 1)
    new_path = _strip_diff_path(lines[i][4:])
    i += 1

    is_creation = old_path == _DEV_NULL
    is_deletion = new_path == _DEV_NULL
    if is_creation and is_deletion:
        raise PatchParseError("both sides are /dev/null", i)
    target = old_path if is_deletion else new_path

    hunks: list[Hunk] = []
    while i < len(lines) and lines[i].startswith("@@"):
        m = _HUNK_RE.match(lines[i])
        if not m:
            raise PatchParseError(f"malformed hunk header: {lines[i]!r}", i + 1)
        old_start = int(m.group(1))
        old_len = int(m.group(2)) if m.group(2) is not None else 1
        new_start = int(m.group(3))
        new_len = int(m.group(4)) if m.group(4) is not None else 1
        i += 1
        body: list[tuple[str, str]] = []
        seen_old = seen_new = 0
        nl_old = nl_new = False
        while (seen_old < old_len or seen_new < new_len) and i < len(lines):
            row = lines[i]
            tag = row[0] if row else " "
            if tag == "\\":
                # No-newline marker applies to the previous tagged line.
                if body:
                    prev = body[-1][0]
                    nl_old = nl_old or prev in (" ", "-")
                    nl_new = nl_new or prev in (" ", "+")
                i += 1
                continue
            if tag not in (" ", "+", "-"):
                raise PatchParseError(f"unexpected hunk line: {row[:60]!r}", i + 1)
            text = row[1:] if row else ""
            if tag in (" ", "-"):
                seen_old += 1
            if tag in (" ", "+"):
                seen_new += 1
            if seen_old > old_len or seen_new > new_len:
                raise PatchParseError("hunk body exceeds counts in header", i + 1)
            body.append((tag, text))
            i += 1
        if seen_old != old_len or seen_new != new_len:
            raise PatchParseError("hunk body shorter than counts in header", i)
        if i < len(lines) and lines[i].startswith("\\"):
            prev = body[-1][0] if body else " "
            nl_old = nl_old or prev in (" ", "-")
            nl_new = nl_new or prev in (" ", "+")
            i += 1
        hunks.append(Hunk(old_start, old_len, new_start, new_len, tuple(body),
                          no_newline_old=nl_old, no_newline_new=nl_new))
    if not hunks:
        raise PatchParseError(f"no hunks for {target}", i)
    return i, FilePatch(target_path=target, hunks=tuple(hunks),
                        is_creation=is_creation, is_deletion=is_deletion)


def render_patch(patch: UnifiedPatch) -> str:
    """Render back to unified diff text that reparses equivalently."""
    out: list[str] = []
    for fp in patch.files:
        out.append(f"--- {_DEV_NULL if fp.is_creation else 'a/' + fp.target_path}")
        out.append(f"+++ {_DEV_NULL if fp.is_deletion else 'b/' + fp.target_path}")
        for h in fp.hunks:
            out.append(f"@@ -{h.old_start},{h.old_len} +{h.new_start},{h.new_len} @@")
            out.extend(f"{tag}{text}" for tag, text in h.lines)
            if h.no_newline_new or h.no_newline_old:
                out.append("\\ No newline at end of file")
    return "\n".join(out) + "\n"


def reverse_patch(patch: UnifiedPatch) -> UnifiedPatch:
    """The inverse patch: applying it undoes a clean forward application."""
    flip = {" ": " ", "+": "-", "-": "+"}
    files = []
    for fp in patch.files:
        hunks = tuple(
            Hunk(
                old_start=h.new_start,
                old_len=h.new_len,
                new_start=h.old_start,
                new_len=h.old_len,
                lines=tuple((flip[tag], text) for tag, text in h.lines),
                no_newline_old=h.no_newline_new,
                no_newline_new=h.no_newline_old,
            )
            for h in fp.hunks
        )
        files.append(
            FilePatch(
                target_path=fp.target_path,
                hunks=hunks,
                is_creation=fp.is_deletion,
                is_deletion=fp.is_creation,
            )
        )
    return UnifiedPatch(files=tuple(files))


# --------------------------------------------------------------------------
# Scope


@dataclass(frozen=True)
class WorkspaceLayout:
    source_prefix: str = "src"
    tests_prefix: str = "tests"

    def __post_init__(self):
        for prefix in (self.source_prefix, self.tests_prefix):
            if not prefix or prefix.startswith("/") or ".." in PurePosixPath(prefix).parts:
                raise ValueError(f"bad tree prefix: {prefix!r}")
        a, b = self.source_prefix.rstrip("/"), self.tests_prefix.rstrip("/")
        if a == b or a.startswith(b + "/") or b.startswith(a + "/"):
            raise ValueError("source and tests prefixes must be disjoint")


def _under(path: str, prefix: str) -> bool:
    prefix = prefix.rstrip("/")
    return path == prefix or path.startswith(prefix + "/")


def check_scope(patch: UnifiedPatch, phase: Phase, layout: WorkspaceLayout) -> None:
    """Require every target to sit in the tree that is writable in ``phase``."""
    writable = {
        Phase.LOGIC_GENESIS: layout.source_prefix,
        Phase.TEST_GENESIS: layout.tests_prefix,
    }.get(phase)
    if writable is None:
        raise NoWritePhase(f"{phase.value} grants no write capability")
    offending = [p for p in patch.target_paths() if not _under(p, writable)]
    if offending:
        raise ScopeViolation(offending, phase)


# --------------------------------------------------------------------------
# Sanitizer

DEFAULT_GUARDED_NAMESPACES = ("pytest", "_pytest", "unittest", "nose")


class RuleKind(str, Enum):
    IMPORT_OF_GUARDED = "import-of-guarded"
    ATTRIBUTE_REASSIGNMENT = "attribute-reassignment-on-guarded"
    DYNAMIC_EVALUATION = "dynamic-evaluation"
    LOCKED_TREE_WRITE = "write-into-locked-tree"


@dataclass(frozen=True)
class SanitizerRule:
    rule_id: str
    kind: RuleKind
    pattern: str


@dataclass(frozen=True)
class Violation:
    rule_id: str
    target_path: str
    line_number: int
    excerpt: str


_DYNAMIC_EVAL_PATTERN = r"eval|exec|compile|__import__|importlib\.import_module"

# Call names that can mutate the file system when handed a path.
_WRITE_CALL_NAMES = frozenset({
    "write_text", "write_bytes", "unlink", "remove", "removedirs", "rmdir",
    "rmtree", "rename", "replace", "renames", "mkdir", "makedirs", "touch",
    "symlink", "symlink_to", "link", "hardlink_to", "copy", "copy2",
    "copyfile", "copytree", "move", "chmod",
})
_PATH_CTORS = frozenset({"Path", "PurePath", "PosixPath", "WindowsPath"})


@dataclass(frozen=True)
class SanitizerRuleSet:
    """Deny-list applied to post-application file contents.

    The four default rule families cover the classic evasion routes: pulling
    a guarded test-framework namespace into generated code, monkey-patching
    attributes on one, hiding logic behind dynamic evaluation, and writing
    through the file system into the locked tree.
    """

    guarded_namespaces: tuple[str, ...] = DEFAULT_GUARDED_NAMESPACES
    locked_tree_prefix: str = "tests"
    rules: tuple[SanitizerRule, ...] = ()
    code_suffixes: tuple[str, ...] = (".py",)

    def __post_init__(self):
        if not self.rules:
            guarded = "|".join(re.escape(n) for n in self.guarded_namespaces)
            object.__setattr__(self, "rules", (
                SanitizerRule("no-guarded-import", RuleKind.IMPORT_OF_GUARDED, guarded),
                SanitizerRule("no-guarded-monkeypatch", RuleKind.ATTRIBUTE_REASSIGNMENT, guarded),
                SanitizerRule("no-dynamic-eval", RuleKind.DYNAMIC_EVALUATION, _DYNAMIC_EVAL_PATTERN),
                SanitizerRule("no-locked-tree-write", RuleKind.LOCKED_TREE_WRITE,
                              self.locked_tree_prefix),
            ))
        ids = [r.rule_id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise ValueError("rule_ids must be unique")
        if any(not r.pattern for r in self.rules):
            raise ValueError("rule patterns must be non-empty")

    def without(self, *kinds: RuleKind) -> "SanitizerRuleSet":
        kept = tuple(r for r in self.rules if r.kind not in kinds)
        return SanitizerRuleSet(self.guarded_namespaces, self.locked_tree_prefix,
                                kept, self.code_suffixes)

    def with_locked_prefix(self, prefix: str) -> "SanitizerRuleSet":
        rules = tuple(
            SanitizerRule(r.rule_id, r.kind, prefix)
            if r.kind is RuleKind.LOCKED_TREE_WRITE else r
            for r in self.rules
        )
        return SanitizerRuleSet(self.guarded_namespaces, prefix, rules, self.code_suffixes)


def rules_for_phase(base: SanitizerRuleSet, phase: Phase, layout: WorkspaceLayout) -> SanitizerRuleSet:
    """Phase-adjusted rule set.

    In LogicGenesis the locked tree is the tests tree and all four families
    apply.  In TestGenesis the tests tree is the writable one, where importing
    the test framework is legitimate, so only the dynamic-evaluation and
    locked-tree-write families remain, with the lock pointing at the source
    prefix.
    """
    if phase is Phase.LOGIC_GENESIS:
        return base.with_locked_prefix(layout.tests_prefix)
    if phase is Phase.TEST_GENESIS:
        return base.without(
            RuleKind.IMPORT_OF_GUARDED, RuleKind.ATTRIBUTE_REASSIGNMENT
        ).with_locked_prefix(layout.source_prefix)
    return base


class _Scan(ast.NodeVisitor):
    def __init__(self, path: str, source_lines: list[str], rules: SanitizerRuleSet):
        self.path = path
        self.lines = source_lines
        self.rules = rules
        self.aliases: dict[str, str] = {}
        self.violations: list[Violation] = []

    # -- helpers

    def _excerpt(self, lineno: int) -> str:
        if 1 <= lineno <= len(self.lines):
            return self.lines[lineno - 1]
        return ""

    def _hit(self, rule: SanitizerRule, lineno: int) -> None:
        self.violations.append(
            Violation(rule.rule_id, self.path, lineno, self._excerpt(lineno))
        )

    def _dotted(self, node: ast.AST) -> Optional[str]:
        parts: list[str] = []
        while isinstance(node, ast.Attribute):
            parts.append(node.attr)
            node = node.value
        if isinstance(node, ast.Name):
            root = self.aliases.get(node.id, node.id)
            parts.append(root)
            return ".".join(reversed(parts))
        return None

    def _matches(self, pattern: str, dotted: Optional[str]) -> bool:
        return bool(dotted) and re.match(rf"(?:{pattern})(?:\.|$)", dotted) is not None

    def _rules_of(self, kind: RuleKind) -> list[SanitizerRule]:
        return [r for r in self.rules.rules if r.kind is kind]

    # -- alias collection (first pass)

    def collect_aliases(self, tree: ast.AST) -> None:
        for node in ast.walk(tree):
            if isinstance(node, ast.Import):
                for alias in node.names:
                    bound = alias.asname or alias.name.split(".")[0]
                    self.aliases[bound] = alias.name if alias.asname else alias.name.split(".")[0]
            elif isinstance(node, ast.ImportFrom) and node.module and node.level == 0:
                for alias in node.names:
                    bound = alias.asname or alias.name
                    self.aliases[bound] = f"{node.module}.{alias.name}"

    # -- detection (second pass)

    def visit_Import(self, node: ast.Import) -> None:
        for rule in self._rules_of(RuleKind.IMPORT_OF_GUARDED):
            for alias in node.names:
                if self._matches(rule.pattern, alias.name):
                    self._hit(rule, node.lineno)
        self.generic_visit(node)

    def visit_ImportFrom(self, node: ast.ImportFrom) -> None:
        if node.module and node.level == 0:
            for rule in self._rules_of(RuleKind.IMPORT_OF_GUARDED):
                if self._matches(rule.pattern, node.module):
                    self._hit(rule, node.lineno)
        self.generic_visit(node)

    def _check_attr_target(self, target: ast.AST, lineno: int) -> None:
        if isinstance(target, ast.Attribute):
            base = self._dotted(target.value)
            for rule in self._rules_of(RuleKind.ATTRIBUTE_REASSIGNMENT):
                if self._matches(rule.pattern, base):
                    self._hit(rule, lineno)

    def visit_Assign(self, node: ast.Assign) -> None:
        for target in node.targets:
            self._check_attr_target(target, node.lineno)
        self.generic_visit(node)

    def visit_AugAssign(self, node: ast.AugAssign) -> None:
        self._check_attr_target(node.target, node.lineno)
        self.generic_visit(node)

    def visit_Call(self, node: ast.Call) -> None:
        dotted = self._dotted(node.func)
        for rule in self._rules_of(RuleKind.DYNAMIC_EVALUATION):
            if dotted and re.fullmatch(rule.pattern, dotted):
                self._hit(rule, node.lineno)
        # setattr(<guarded>, ...) is a monkey-patch in call form.
        if isinstance(node.func, ast.Name) and node.func.id == "setattr" and node.args:
            base = self._dotted(node.args[0])
            for rule in self._rules_of(RuleKind.ATTRIBUTE_REASSIGNMENT):
                if self._matches(rule.pattern, base):
                    self._hit(rule, node.lineno)
        self._check_write_call(node, dotted)
        self.generic_visit(node)

    def _literal_path_args(self, node: ast.Call) -> list[str]:
        literals = [
            a.value for a in (*node.args, *(kw.value for kw in node.keywords))
            if isinstance(a, ast.Constant) and isinstance(a.value, str)
        ]
        # Path("...")<.method> pushes the literal into the constructor.
        func = node.func
        if isinstance(func, ast.Attribute) and isinstance(func.value, ast.Call):
            ctor = func.value.func
            if isinstance(ctor, ast.Name) and ctor.id in _PATH_CTORS:
                literals.extend(
                    a.value for a in func.value.args
                    if isinstance(a, ast.Constant) and isinstance(a.value, str)
                )
        return literals

    def _call_name(self, node: ast.Call) -> Optional[str]:
        if isinstance(node.func, ast.Attribute):
            return node.func.attr
        if isinstance(node.func, ast.Name):
            return self.aliases.get(node.func.id, node.func.id).split(".")[-1]
        return None

    def _check_write_call(self, node: ast.Call, dotted: Optional[str]) -> None:
        name = self._call_name(node)
        if name == "open":
            mode = None
            if len(node.args) >= 2 and isinstance(node.args[1], ast.Constant):
                mode = node.args[1].value
            for kw in node.keywords:
                if kw.arg == "mode" and isinstance(kw.value, ast.Constant):
                    mode = kw.value.value
            if not (isinstance(mode, str) and set(mode) & set("wax+")):
                return
        elif name not in _WRITE_CALL_NAMES:
            return
        for rule in self._rules_of(RuleKind.LOCKED_TREE_WRITE):
            prefix = rule.pattern.rstrip("/")
            for literal in self._literal_path_args(node):
                norm = literal.replace("\\", "/")
                if norm == prefix or norm.startswith(prefix + "/"):
                    self._hit(rule, node.lineno)


def sanitize(
    changed_files: Iterable[tuple[str, str]],
    rules: SanitizerRuleSet,
) -> list[Violation]:
    """Scan post-application file contents against the rule set.

    Matching is AST-based, so occurrences inside string literals and comments
    never trigger.  Untokenizable code files raise SanitizeError: the caller
    treats that as a violation, never as a pass.
    """
    violations: list[Violation] = []
    for path, content in changed_files:
        if not path.endswith(rules.code_suffixes):
            continue
        try:
            tree = ast.parse(content)
        except (SyntaxError, ValueError) as exc:
            raise SanitizeError(path, f"unparseable: {exc}") from exc
        scan = _Scan(path, content.splitlines(), rules)
        scan.collect_aliases(tree)
        scan.visit(tree)
        violations.extend(scan.violations)
    violations.sort(key=lambda v: (v.target_path, v.line_number, v.rule_id))
    return violations


# --------------------------------------------------------------------------
# Application


@dataclass(frozen=True)
class RejectedHunk:
    path: str
    hunk_index: int
    reason: str


@dataclass(frozen=True)
class ApplyReport:
    files_changed: tuple[str, ...] = ()
    reject_hunks: tuple[RejectedHunk, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.reject_hunks


def _read_lines(path: Path) -> tuple[list[str], bool]:
    text = path.read_text()
    if text == "":
        return [], True
    ends_nl = text.endswith("\n")
    lines = text.split("\n")
    if ends_nl:
        lines.pop()
    return lines, ends_nl


def _apply_hunks(lines: list[str], hunks: tuple[Hunk, ...]) -> tuple[Optional[list[str]], Optional[str]]:
    offset = 0
    out = list(lines)
    for h in hunks:
        if h.old_len > 0:
            start = h.old_start - 1 + offset
        else:
            start = h.old_start + offset  # pure insertion sits after old_start
        if start < 0 or start + h.old_len > len(out):
            return None, "hunk falls outside the file"
        expected = h.old_lines()
        if out[start:start + h.old_len] != expected:
            return None, "context mismatch"
        replacement = h.new_lines()
        out[start:start + h.old_len] = replacement
        offset += len(replacement) - h.old_len
    return out, None


def apply_patch(workspace_root: Path | str, patch: UnifiedPatch) -> ApplyReport:
    """Apply a parsed patch atomically.

    Either every hunk of every file applies with exact context and the tree
    is updated, or nothing is written and the report lists each rejected
    hunk (stale context, missing target, existing creation target).
    """
    root = Path(workspace_root)
    staged: dict[str, Optional[str]] = {}
    rejects: list[RejectedHunk] = []
    for fp in patch.files:
        target = root / fp.target_path
        if not str(target.resolve()).startswith(str(root.resolve()) + "/"):
            rejects.append(RejectedHunk(fp.target_path, 0, "resolves outside workspace"))
            continue
        if fp.is_creation:
            if target.exists():
                rejects.append(RejectedHunk(fp.target_path, 0, "creation target already exists"))
                continue
            lines: list[str] = []
            ends_nl = True
        else:
            if not target.is_file():
                rejects.append(RejectedHunk(fp.target_path, 0, "missing target"))
                continue
            lines, ends_nl = _read_lines(target)
        new_lines, reason = _apply_hunks(lines, fp.hunks)
        if reason is not None:
            # Attribute the reject to the first failing hunk for diagnostics.
            for idx in range(len(fp.hunks)):
                _, probe_reason = _apply_hunks(lines, fp.hunks[: idx + 1])
                if probe_reason is not None:
                    rejects.append(RejectedHunk(fp.target_path, idx, probe_reason))
                    break
            continue
        assert new_lines is not None
        if fp.is_deletion:
            if new_lines:
                rejects.append(RejectedHunk(fp.target_path, len(fp.hunks) - 1,
                                            "deletion leaves residual content"))
                continue
            staged[fp.target_path] = None
        else:
            final_nl = ends_nl and not any(h.no_newline_new for h in fp.hunks)
            if fp.is_creation:
                final_nl = not any(h.no_newline_new for h in fp.hunks)
            staged[fp.target_path] = "\n".join(new_lines) + ("\n" if final_nl else "")
    if rejects:
        return ApplyReport(reject_hunks=tuple(rejects))
    for rel, content in staged.items():
        target = root / rel
        if content is None:
            target.unlink()
        else:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(content)
    return ApplyReport(files_changed=tuple(staged))
