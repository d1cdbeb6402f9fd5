"""CodeQL-backed extraction backend and rule compiler.

Everything here shells out to the ``codeql`` binary, resolved in a fixed
order: explicit path, then the QLFORGE_CODEQL environment variable, then
PATH lookup. A missing binary raises BackendUnavailable (extraction) or
CompilerUnavailable (compilation) instead of a raw OSError, so callers can
tell a broken environment from a broken rule.
"""

from __future__ import annotations

import json
import logging
import os
import re
import shutil
import subprocess
import tempfile
import time
from pathlib import Path

from .errors import BackendUnavailable, CompilerUnavailable
from .records import ApiRecord, SourceLocation, clamp_snippet, make_record
from .rulegen import CompileResult, CompileStatus, Diagnostic

logger = logging.getLogger(__name__)

ENV_CODEQL = "QLFORGE_CODEQL"
DEFAULT_TIMEOUT_S = 600.0

_QLPACK_YML = """\
name: qlforge/generated-rule
version: 0.0.0
dependencies:
  codeql/java-all: "*"
"""

# Matches both "file:12:3: error: msg" and span form "file:12:3:14:9: error: msg".
_DIAG_RE = re.compile(
    r"^(?P<file>[^:\s][^:]*):(?P<line>\d+):(?P<col>\d+)(?::\d+:\d+)?:?\s*"
    r"(?:(?P<sev>error|warning)[: ]\s*)?(?P<msg>.+)$",
    re.IGNORECASE,
)


def resolve_binary(explicit: str | None = None) -> str | None:
    """Locate the codeql binary: explicit path, then env, then PATH."""
    for candidate in (explicit, os.environ.get(ENV_CODEQL)):
        if candidate:
            return candidate
    return shutil.which("codeql")


def _run(cmd: list[str], timeout_s: float | None, unavailable_exc) -> subprocess.CompletedProcess:
    logger.debug("running: %s", " ".join(cmd))
    try:
        return subprocess.run(
            cmd,
            capture_output=True,
            text=True,
            timeout=timeout_s if timeout_s is not None else DEFAULT_TIMEOUT_S,
        )
    except FileNotFoundError as exc:
        raise unavailable_exc(f"codeql binary not found: {cmd[0]}") from exc


def parse_compile_diagnostics(stderr: str) -> tuple[Diagnostic, ...]:
    diagnostics = []
    for line in stderr.splitlines():
        m = _DIAG_RE.match(line.strip())
        if not m:
            continue
        diagnostics.append(
            Diagnostic(
                message=m.group("msg").strip(),
                file=m.group("file"),
                line=int(m.group("line")),
                column=int(m.group("col")),
                severity=(m.group("sev") or "error").lower(),
            )
        )
    return tuple(diagnostics)


class CodeQLBackend:
    """Extraction backend that builds a database and runs the bundled query."""

    name = "codeql"
    version = "cli"

    def __init__(self, binary: str | None = None, timeout_s: float | None = None):
        self.binary = resolve_binary(binary)
        self.timeout_s = timeout_s

    def _require_binary(self) -> str:
        if not self.binary:
            raise BackendUnavailable(
                f"codeql binary not found; set {ENV_CODEQL} or codeql.path"
            )
        return self.binary

    def enumerate_calls(self, project_root: str | Path) -> list[ApiRecord]:
        binary = self._require_binary()
        project_root = Path(project_root)
        from .prompts import load_template

        with tempfile.TemporaryDirectory(prefix="qlforge-codeql-") as tmp:
            tmp_path = Path(tmp)
            db_dir = tmp_path / "db"
            query = tmp_path / "extract_calls.ql"
            query.write_text(load_template("extract_calls.ql"), encoding="utf-8")
            (tmp_path / "qlpack.yml").write_text(_QLPACK_YML, encoding="utf-8")
            bqrs = tmp_path / "calls.bqrs"

            create = _run(
                [
                    binary,
                    "database",
                    "create",
                    str(db_dir),
                    "--language=java",
                    f"--source-root={project_root}",
                    "--overwrite",
                ],
                self.timeout_s,
                BackendUnavailable,
            )
            if create.returncode != 0:
                raise BackendUnavailable(
                    f"codeql database create failed: {create.stderr.strip()[:500]}"
                )
            run = _run(
                [binary, "query", "run", str(query), f"--database={db_dir}", f"--output={bqrs}"],
                self.timeout_s,
                BackendUnavailable,
            )
            if run.returncode != 0:
                raise BackendUnavailable(
                    f"codeql query run failed: {run.stderr.strip()[:500]}"
                )
            decode = _run(
                [binary, "bqrs", "decode", "--format=json", str(bqrs)],
                self.timeout_s,
                BackendUnavailable,
            )
            if decode.returncode != 0:
                raise BackendUnavailable(
                    f"codeql bqrs decode failed: {decode.stderr.strip()[:500]}"
                )
            return self._rows_to_records(decode.stdout, project_root)

    def _rows_to_records(self, decoded: str, project_root: Path) -> list[ApiRecord]:
        doc = json.loads(decoded)
        tuples = doc.get("#select", {}).get("tuples", [])
        records = []
        for row in tuples:
            package, type_name, method, params_string, return_type, rel_file, line = row
            param_types = [
                t.strip() for t in params_string.strip("()").split(",") if t.strip()
            ]
            records.append(
                make_record(
                    package=package,
                    type_name=type_name,
                    method=method,
                    params=[(f"arg{i}", t) for i, t in enumerate(param_types)],
                    return_type=return_type,
                    annotations=[],
                    snippet=self._snippet(project_root / rel_file, int(line)),
                    first_seen=SourceLocation(file=rel_file, line=int(line)),
                )
            )
        return sorted(records, key=lambda r: (r.id, r.first_seen.file, r.first_seen.line))

    @staticmethod
    def _snippet(path: Path, line: int) -> str:
        try:
            lines = path.read_text(encoding="utf-8", errors="replace").splitlines()
        except OSError:
            return ""
        lo = max(0, line - 1 - 10)
        hi = min(len(lines), line + 10)
        return clamp_snippet("\n".join(lines[lo:hi]))


class CodeQLCompiler:
    """Compiles and executes generated rules through the codeql CLI."""

    name = "codeql"

    def __init__(self, binary: str | None = None, timeout_s: float | None = None):
        self.binary = resolve_binary(binary)
        self.timeout_s = timeout_s

    def _require_binary(self) -> str:
        if not self.binary:
            raise CompilerUnavailable(
                f"codeql binary not found; set {ENV_CODEQL} or codeql.path"
            )
        return self.binary

    def _rule_workspace(self, tmp: Path, rule_text: str) -> Path:
        (tmp / "qlpack.yml").write_text(_QLPACK_YML, encoding="utf-8")
        rule = tmp / "rule.ql"
        rule.write_text(rule_text, encoding="utf-8")
        return rule

    def compile(self, pair_id: str, rule_text: str) -> CompileResult:
        binary = self._require_binary()
        started = time.monotonic()
        with tempfile.TemporaryDirectory(prefix="qlforge-compile-") as tmp:
            rule = self._rule_workspace(Path(tmp), rule_text)
            try:
                proc = _run(
                    [binary, "query", "compile", str(rule)],
                    self.timeout_s,
                    CompilerUnavailable,
                )
            except subprocess.TimeoutExpired:
                elapsed = time.monotonic() - started
                return CompileResult(
                    CompileStatus.TIMEOUT,
                    (Diagnostic(message=f"codeql query compile exceeded {self.timeout_s}s"),),
                    elapsed,
                )
        elapsed = time.monotonic() - started
        if proc.returncode == 0:
            return CompileResult(CompileStatus.OK, (), elapsed)
        diagnostics = parse_compile_diagnostics(proc.stderr)
        if not diagnostics:
            message = proc.stderr.strip() or f"codeql exited {proc.returncode}"
            diagnostics = (Diagnostic(message=message[:2000]),)
        return CompileResult(CompileStatus.ERROR, diagnostics, elapsed)

    def execute(self, pair_id: str, rule_text: str, database: str) -> list[dict]:
        binary = self._require_binary()
        with tempfile.TemporaryDirectory(prefix="qlforge-scan-") as tmp:
            tmp_path = Path(tmp)
            rule = self._rule_workspace(tmp_path, rule_text)
            sarif_path = tmp_path / "out.sarif"
            proc = _run(
                [
                    binary,
                    "database",
                    "analyze",
                    database,
                    str(rule),
                    "--format=sarif-latest",
                    f"--output={sarif_path}",
                    "--rerun",
                ],
                self.timeout_s,
                CompilerUnavailable,
            )
            if proc.returncode != 0:
                raise CompilerUnavailable(
                    f"codeql database analyze failed: {proc.stderr.strip()[:500]}"
                )
            sarif = json.loads(sarif_path.read_text(encoding="utf-8"))
        return _sarif_to_findings(sarif)


def _sarif_to_findings(sarif: dict) -> list[dict]:
    findings = []
    for run in sarif.get("runs", []):
        for result in run.get("results", []):
            for location in result.get("locations", []):
                physical = location.get("physicalLocation", {})
                region = physical.get("region", {})
                start = region.get("startLine")
                if start is None:
                    continue
                findings.append(
                    {
                        "file": physical.get("artifactLocation", {}).get("uri", ""),
                        "start_line": int(start),
                        "end_line": int(region.get("endLine", start)),
                        "message": result.get("message", {}).get("text", ""),
                    }
                )
    return findings
