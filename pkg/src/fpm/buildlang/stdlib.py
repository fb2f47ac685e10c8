"""Builtin procedures of the build language.

File-system builtins replace the usual shell toolbox (cp -r, rm -rf, sed,
find).  All of them resolve relative names against the interpreter's own
working directory and funnel through :class:`BuildContext`, which refuses
writes outside the build directory and ``$out``.
"""

from __future__ import annotations

import io
import os
import re
import shutil
import stat
import subprocess
import uuid

from ..errors import (
    EvalError,
    ImpurityDetected,
    InvokeFailed,
    KeyNotFound,
    RegexError,
    WrongType,
)
from ..store import remove_tree
from .evaluator import UNSPECIFIED, Builtin, Env, Interpreter, is_procedure, is_true
from .reader import Symbol, parse, write

_SHEBANG_RE = re.compile(rb"^#!\s*(\S+)(.*)$", re.DOTALL)
_TEMPLATE_RE = re.compile(r"\\(\d)")


class BuildContext:
    """Per-build state visible to builtins: environment, cwd, log, write fence."""

    def __init__(self, env: dict, build_dir: str, out: str | None = None, log=None):
        self.env = dict(env)
        self.build_dir = os.path.abspath(build_dir)
        self.cwd = self.build_dir
        self.out = out if out is not None else self.env.get("out")
        self.log = log if log is not None else io.StringIO()
        self.fs_log: list[tuple[str, str]] = []

    def resolve(self, path: str) -> str:
        return os.path.normpath(os.path.join(self.cwd, path))

    def record(self, op: str, path: str) -> str:
        self.fs_log.append((op, path))
        return path

    def reading(self, path: str) -> str:
        return self.record("read", self.resolve(path))

    def writing(self, path: str) -> str:
        full = self.resolve(path)
        allowed = [self.build_dir] + ([os.path.normpath(self.out)] if self.out else [])
        if not any(full == a or full.startswith(a + os.sep) for a in allowed):
            raise ImpurityDetected(f"build attempted to write outside its sandbox: {full}", [full])
        return self.record("write", full)

    def say(self, text: str):
        self.log.write(text)
        if hasattr(self.log, "flush"):
            self.log.flush()


def expect(value, kind, who: str, what: str = "argument"):
    ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
    if not ok:
        names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise WrongType(f"{who}: {what} must be {names}, got {write_safe(value)}")
    return value


def expect_list(value, who):
    if not isinstance(value, list):
        raise WrongType(f"{who}: expected a list, got {write_safe(value)}")
    return value


def write_safe(value) -> str:
    try:
        return write(value)
    except Exception:
        return repr(value)


def display_string(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, Symbol):
        return value.name
    return write_safe(value)


def equal(a, b) -> bool:
    """Structural equality; booleans, symbols and other objects by identity."""
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(equal(x, y) for x, y in zip(a, b))
    if isinstance(a, (bool, Symbol)) or isinstance(b, (bool, Symbol)):
        return a is b
    if isinstance(a, (str, int)) and type(a) is type(b):
        return a == b
    return a is b


# -- association lists -------------------------------------------------------

def _pair_index(alist, key, who):
    expect_list(alist, who)
    for i, pair in enumerate(alist):
        if not (isinstance(pair, list) and len(pair) == 2):
            raise WrongType(f"{who}: association list entries must be (key value) pairs")
        if equal(pair[0], key):
            return i
    return -1


def assoc_ref(alist, key):
    i = _pair_index(alist, key, "assoc-ref")
    return alist[i][1] if i >= 0 else False


def alist_cons_after(key, new_key, value, alist):
    """New alist with (new_key value) right after the first entry keyed ``key``."""
    i = _pair_index(alist, key, "alist-cons-after")
    if i < 0:
        raise KeyNotFound(f"alist-cons-after: no entry for {display_string(key)}")
    return list(alist[:i + 1]) + [[new_key, value]] + list(alist[i + 1:])


def alist_replace(key, value, alist):
    i = _pair_index(alist, key, "alist-replace")
    if i < 0:
        raise KeyNotFound(f"alist-replace: no entry for {display_string(key)}")
    return list(alist[:i]) + [[key, value]] + list(alist[i + 1:])


# -- file utilities (plain Python, reused host-side and in tests) ------------

def find_files(directory: str, regex: str) -> list[str]:
    """Regular files under ``directory`` whose base name matches ``regex``."""
    pattern = compile_regex(regex)
    found = []
    if not os.path.isdir(directory):
        return found
    for dirpath, dirnames, filenames in os.walk(directory):
        dirnames.sort()
        for fn in filenames:
            full = os.path.join(dirpath, fn)
            if pattern.search(fn) and os.path.isfile(full) and not os.path.islink(full):
                found.append(full)
    return sorted(found)


def copy_recursively(src: str, dst: str):
    """cp -r: merge ``src`` into ``dst``; copies are owner-writable."""
    if os.path.isdir(src) and not os.path.islink(src):
        os.makedirs(dst, exist_ok=True)
        for dirpath, dirnames, filenames in os.walk(src):
            rel = os.path.relpath(dirpath, src)
            target_dir = os.path.normpath(os.path.join(dst, rel))
            os.makedirs(target_dir, exist_ok=True)
            os.chmod(target_dir, os.stat(target_dir).st_mode | 0o700)
            for name in list(dirnames):
                s = os.path.join(dirpath, name)
                if os.path.islink(s):
                    dirnames.remove(name)
                    _copy_one(s, os.path.join(target_dir, name))
            for name in filenames:
                _copy_one(os.path.join(dirpath, name), os.path.join(target_dir, name))
    else:
        parent = os.path.dirname(dst)
        if parent:
            os.makedirs(parent, exist_ok=True)
        _copy_one(src, dst)


def _copy_one(src, dst):
    if os.path.lexists(dst):
        remove_tree(dst)
    if os.path.islink(src):
        os.symlink(os.readlink(src), dst)
    else:
        shutil.copy2(src, dst)
        os.chmod(dst, os.stat(dst).st_mode | 0o200)


def _atomic_rewrite(path: str, data: bytes, mode: int):
    tmp = os.path.join(os.path.dirname(path) or ".", f".{os.path.basename(path)}.tmp-{uuid.uuid4().hex}")
    with open(tmp, "wb") as f:
        f.write(data)
    os.chmod(tmp, stat.S_IMODE(mode))
    os.replace(tmp, path)


def patch_shebang(path: str, input_dirs: list[str]) -> bool:
    """Point a ``#!`` line at the first input providing ``bin/<prog>``.

    Returns True when the file was rewritten.
    """
    if not os.path.isfile(path) or os.path.islink(path):
        return False
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"#!"):
        return False
    first, nl, rest = data.partition(b"\n")
    m = _SHEBANG_RE.match(first)
    if not m:
        return False
    interpreter, tail = m.group(1), m.group(2)
    prog = os.path.basename(interpreter).decode("utf-8", "surrogateescape")
    for d in input_dirs:
        candidate = os.path.join(d, "bin", prog)
        if os.path.isfile(candidate):
            new = os.fsencode(candidate)
            if new == interpreter:
                return False
            mode = os.stat(path).st_mode
            _atomic_rewrite(path, b"#!" + new + tail + nl + rest, mode)
            return True
    return False


def compile_regex(regex: str):
    try:
        return re.compile(regex)
    except re.error as e:
        raise RegexError(f"bad regular expression {regex!r}: {e}") from e


def expand_template(template: str, match: re.Match) -> str:
    def group(m):
        n = int(m.group(1))
        if n > (match.re.groups or 0):
            raise RegexError(f"template refers to missing group \\{n}")
        return match.group(n) or ""
    return _TEMPLATE_RE.sub(group, template)


def substitute_file(path: str, clauses: list[tuple[str, str]]) -> bool:
    """sed-like rewrite: per line, the first matching clause replaces its matches.

    Returns True if the file changed.
    """
    compiled = [(compile_regex(rx), tpl) for rx, tpl in clauses]
    with open(path, "rb") as f:
        original = f.read()
    text = original.decode("utf-8", "surrogateescape")
    out = []
    for line in text.splitlines(keepends=True):
        body = line.rstrip("\n")
        ending = line[len(body):]
        for rx, tpl in compiled:
            if rx.search(body):
                body = rx.sub(lambda m, tpl=tpl: expand_template(tpl, m), body)
                break
        out.append(body + ending)
    data = "".join(out).encode("utf-8", "surrogateescape")
    if data == original:
        return False
    _atomic_rewrite(path, data, os.stat(path).st_mode)
    return True


# -- builtin table -------------------------------------------------------------

def _string_append(*parts):
    for p in parts:
        expect(p, str, "string-append")
    return "".join(parts)


def _cons(x, lst):
    return [x] + list(expect_list(lst, "cons"))


def _car(lst):
    if not expect_list(lst, "car"):
        raise WrongType("car: empty list")
    return lst[0]


def _cdr(lst):
    if not expect_list(lst, "cdr"):
        raise WrongType("cdr: empty list")
    return list(lst[1:])


def _append(*lists):
    out = []
    for lst in lists:
        out.extend(expect_list(lst, "append"))
    return out


def _string_join(lst, sep=" "):
    for s in expect_list(lst, "string-join"):
        expect(s, str, "string-join", "element")
    return expect(sep, str, "string-join").join(lst)


def _arith(name, op):
    def fn(*xs):
        for x in xs:
            expect(x, int, name)
        return op(xs)
    return fn


def _sub(xs):
    return -xs[0] if len(xs) == 1 else xs[0] - sum(xs[1:])


def pure_builtins(interp_ref) -> dict[str, Builtin]:
    """Builtins without side effects; safe for host-side evaluation too."""

    def apply_(proc, *args):
        if not is_procedure(proc):
            raise WrongType(f"apply: not a procedure: {write_safe(proc)}")
        *lead, last = args if args else ([],)
        return interp_ref().apply(proc, list(lead) + list(expect_list(last, "apply")))

    def map_(proc, *lists):
        for lst in lists:
            expect_list(lst, "map")
        return [interp_ref().apply(proc, list(items)) for items in zip(*lists)]

    def for_each(proc, *lists):
        for lst in lists:
            expect_list(lst, "for-each")
        for items in zip(*lists):
            interp_ref().apply(proc, list(items))
        return UNSPECIFIED

    def error(message, *irritants):
        raise EvalError(" ".join([display_string(message)] + [write_safe(i) for i in irritants]))

    table = [
        Builtin("string-append", _string_append),
        Builtin("list", lambda *xs: list(xs)),
        Builtin("cons", _cons, 2, 2),
        Builtin("car", _car, 1, 1),
        Builtin("cdr", _cdr, 1, 1),
        Builtin("null?", lambda x: isinstance(x, list) and not x, 1, 1),
        Builtin("pair?", lambda x: isinstance(x, list) and bool(x), 1, 1),
        Builtin("string?", lambda x: isinstance(x, str), 1, 1),
        Builtin("symbol?", lambda x: isinstance(x, Symbol), 1, 1),
        Builtin("procedure?", is_procedure, 1, 1),
        Builtin("equal?", equal, 2, 2),
        Builtin("not", lambda x: x is False, 1, 1),
        Builtin("append", _append),
        Builtin("length", lambda lst: len(expect_list(lst, "length")), 1, 1),
        Builtin("reverse", lambda lst: list(reversed(expect_list(lst, "reverse"))), 1, 1),
        Builtin("apply", apply_, 1),
        Builtin("map", map_, 2),
        Builtin("for-each", for_each, 2),
        Builtin("assoc-ref", assoc_ref, 2, 2),
        Builtin("alist-cons-after", alist_cons_after, 4, 4),
        Builtin("alist-replace", alist_replace, 3, 3),
        Builtin("string-join", _string_join, 1, 2),
        Builtin("symbol->string", lambda s: expect(s, Symbol, "symbol->string").name, 1, 1),
        Builtin("string->symbol", lambda s: Symbol(expect(s, str, "string->symbol")), 1, 1),
        Builtin("number->string", lambda n: str(expect(n, int, "number->string")), 1, 1),
        Builtin("+", _arith("+", sum)),
        Builtin("-", _arith("-", _sub), 1),
        Builtin("=", _arith("=", lambda xs: all(a == b for a, b in zip(xs, xs[1:]))), 1),
        Builtin("<", _arith("<", lambda xs: all(a < b for a, b in zip(xs, xs[1:]))), 1),
        Builtin("error", error, 1),
    ]
    return {b.name: b for b in table}


def build_builtins(ctx: BuildContext, interp_ref) -> dict[str, Builtin]:
    """Side-effecting builtins bound to one build's context."""

    def string_arg(value, who):
        return expect(value, str, who)

    def write_file(path, content):
        target = ctx.writing(string_arg(path, "write-file"))
        with open(target, "w", encoding="utf-8", newline="") as f:
            f.write(string_arg(content, "write-file"))
        return UNSPECIFIED

    def read_file(path):
        with open(ctx.reading(string_arg(path, "read-file")), encoding="utf-8", newline="") as f:
            return f.read()

    def mkdir_p(path):
        os.makedirs(ctx.writing(string_arg(path, "mkdir-p")), exist_ok=True)
        return UNSPECIFIED

    def symlink(target, link):
        os.symlink(string_arg(target, "symlink"), ctx.writing(string_arg(link, "symlink")))
        return UNSPECIFIED

    def invoke(program, *args):
        string_arg(program, "invoke")
        for a in args:
            string_arg(a, "invoke")
        exe = program
        if "/" in program:
            exe = ctx.reading(program)
        else:
            exe = shutil.which(program, path=ctx.env.get("PATH", "")) or program
        ctx.record("exec", exe)
        try:
            proc = subprocess.run([exe, *args], cwd=ctx.cwd, env=ctx.env,
                                  stdout=subprocess.PIPE, stderr=subprocess.STDOUT)
        except OSError as e:
            raise InvokeFailed(program, 127) from e
        ctx.say(proc.stdout.decode("utf-8", "replace"))
        if proc.returncode != 0:
            raise InvokeFailed(program, proc.returncode)
        return True

    def find_files_(directory, regex=".*"):
        base = ctx.reading(string_arg(directory, "find-files"))
        found = find_files(base, string_arg(regex, "find-files"))
        if os.path.isabs(directory):
            return found
        return [os.path.join(directory, os.path.relpath(p, base)) for p in found]

    def copy_recursively_(src, dst):
        copy_recursively(ctx.reading(string_arg(src, "copy-recursively")),
                         ctx.writing(string_arg(dst, "copy-recursively")))
        return UNSPECIFIED

    def copy_file(src, dst):
        target = ctx.writing(string_arg(dst, "copy-file"))
        source = ctx.reading(string_arg(src, "copy-file"))
        _copy_one(source, target)
        return UNSPECIFIED

    def delete_recursively(path):
        remove_tree(ctx.writing(string_arg(path, "delete-recursively")))
        return UNSPECIFIED

    def patch_shebang_(path, input_dirs):
        dirs = [string_arg(d, "patch-shebang") for d in expect_list(input_dirs, "patch-shebang")]
        target = ctx.resolve(string_arg(path, "patch-shebang"))
        if os.path.isfile(target):
            with open(target, "rb") as f:
                if f.read(2) != b"#!":
                    return False
            ctx.writing(path)
        changed = patch_shebang(target, dirs)
        if changed:
            ctx.say(f"patch-shebang: {path}: interpreter patched\n")
        return changed

    def substitute(files, clauses):
        if isinstance(files, str):
            files = [files]
        rules = []
        for clause in expect_list(clauses, "substitute"):
            if not (isinstance(clause, list) and len(clause) == 2
                    and isinstance(clause[0], str) and isinstance(clause[1], str)):
                raise WrongType("substitute: clauses must be (regex replacement) string pairs")
            rules.append((clause[0], clause[1]))
        changed = False
        for f in expect_list(files, "substitute"):
            changed |= substitute_file(ctx.writing(string_arg(f, "substitute")), rules)
        return changed

    def file_exists(path):
        return os.path.lexists(ctx.reading(string_arg(path, "file-exists?")))

    def is_directory(path):
        return os.path.isdir(ctx.reading(string_arg(path, "directory?")))

    def list_directory(path):
        return sorted(os.listdir(ctx.reading(string_arg(path, "list-directory"))))

    def chdir(path):
        full = ctx.resolve(string_arg(path, "chdir"))
        if not os.path.isdir(full):
            raise EvalError(f"chdir: no such directory: {path}")
        ctx.cwd = full
        return UNSPECIFIED

    def getenv(name):
        return ctx.env.get(string_arg(name, "getenv"), False)

    def display(value):
        ctx.say(display_string(value))
        return UNSPECIFIED

    def evaluate_file(path, args=None):
        interp = interp_ref()
        source = read_file(path)
        env = Env(parent=interp.globals, toplevel=True)
        env.vars[Symbol("args")] = [] if args is None else args
        return interp.eval_toplevel(parse(source), env)

    def check_syntax(path):
        parse(read_file(path))
        return True

    def run_phases(phases, args):
        """Run each (name procedure) pair in order; true iff every phase is."""
        for entry in expect_list(phases, "run-phases"):
            if not (isinstance(entry, list) and len(entry) == 2 and is_procedure(entry[1])):
                raise WrongType("run-phases: phases must be (name procedure) pairs")
            name = display_string(entry[0])
            ctx.say(f"starting phase `{name}'\n")
            try:
                result = interp_ref().apply(entry[1], [args])
            except Exception as e:
                ctx.say(f"phase `{name}' failed: {e}\n")
                return False
            if not is_true(result):
                ctx.say(f"phase `{name}' failed\n")
                return False
            ctx.say(f"phase `{name}' done\n")
        return True

    table = [
        Builtin("write-file", write_file, 2, 2),
        Builtin("read-file", read_file, 1, 1),
        Builtin("mkdir-p", mkdir_p, 1, 1),
        Builtin("symlink", symlink, 2, 2),
        Builtin("invoke", invoke, 1),
        Builtin("find-files", find_files_, 1, 2),
        Builtin("copy-recursively", copy_recursively_, 2, 2),
        Builtin("copy-file", copy_file, 2, 2),
        Builtin("delete-recursively", delete_recursively, 1, 1),
        Builtin("patch-shebang", patch_shebang_, 2, 2),
        Builtin("substitute", substitute, 2, 2),
        Builtin("file-exists?", file_exists, 1, 1),
        Builtin("directory?", is_directory, 1, 1),
        Builtin("list-directory", list_directory, 1, 1),
        Builtin("chdir", chdir, 1, 1),
        Builtin("getcwd", lambda: ctx.cwd, 0, 0),
        Builtin("getenv", getenv, 1, 1),
        Builtin("display", display, 1, 1),
        Builtin("evaluate-file", evaluate_file, 1, 2),
        Builtin("check-syntax", check_syntax, 1, 1),
        Builtin("run-phases", run_phases, 2, 2),
    ]
    return {b.name: b for b in table}


def make_interpreter(ctx: BuildContext | None = None, extra: dict | None = None) -> Interpreter:
    """Interpreter with the pure builtins, plus effectful ones when ``ctx`` is given."""
    holder: list[Interpreter] = []

    def interp_ref():
        return holder[0]

    table = pure_builtins(interp_ref)
    if ctx is not None:
        table.update(build_builtins(ctx, interp_ref))
    bindings = {Symbol(name): b for name, b in table.items()}
    for name, value in (extra or {}).items():
        bindings[Symbol(name)] = value
    interp = Interpreter(Env(bindings).freeze())
    holder.append(interp)
    return interp
