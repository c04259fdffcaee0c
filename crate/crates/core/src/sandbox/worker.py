"""Block execution worker.

Reads one JSON request per line from the protocol input and answers with one
JSON reply per line. Generated code never sees the protocol pipes: fds 0 and 1
are pointed at /dev/null and print() output is captured per request.

Requests:
  {"op": "compile", "source": str, "filename": str}
  {"op": "execute", "units": [{"scope": str, "code": b64}], "host": obj|null,
   "report": [scope, ...], "call": {"scope": str, "name": str, "args": [arg]}|null}
where arg is {"value": json} or {"fn": {"scope": str, "name": str}}.
"""

import base64
import builtins
import inspect
import io
import json
import marshal
import os
import re
import sys
import traceback
import types

OUTPUT_LIMIT = 64 * 1024
BLOCK_FILENAME = "<block>"


def compile_source(req):
    filename = req.get("filename") or BLOCK_FILENAME
    try:
        code = compile(req["source"], filename, "exec", dont_inherit=True)
    except SyntaxError as e:
        return {
            "status": "compile_error",
            "line": e.lineno or 0,
            "message": "%s: %s" % (type(e).__name__, e.msg),
        }
    except (ValueError, TypeError) as e:
        return {"status": "compile_error", "line": 0, "message": describe(e)}
    return {"status": "ok", "code": base64.b64encode(marshal.dumps(code)).decode("ascii")}


def describe(exc):
    text = str(exc)
    name = type(exc).__name__
    return "%s: %s" % (name, text) if text else name


def block_line(exc):
    line = 0
    for frame, lineno in traceback.walk_tb(exc.__traceback__):
        if frame.f_code.co_filename.startswith("<"):
            line = lineno
    return line


def plain(value, depth=0):
    if depth > 64:
        raise ValueError("nesting too deep")
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        if -(2 ** 63) <= value < 2 ** 64:
            return value
        raise ValueError("integer out of range")
    if isinstance(value, float):
        if value != value or value in (float("inf"), float("-inf")):
            raise ValueError("non-finite float")
        return value
    if isinstance(value, (list, tuple)):
        return [plain(v, depth + 1) for v in value]
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise ValueError("non-string key")
            out[k] = plain(v, depth + 1)
        return out
    raise ValueError("unsupported type")


def marshal_value(value):
    try:
        return plain(value)
    except (ValueError, RecursionError):
        return {"$repr": repr(value)[:4096]}


# ---------------------------------------------------------------------------
# Editor host: stands in for the text editor skeleton's tkinter environment.
# Dialogs answer from the host state and every user-visible action is recorded
# as an effect.
# ---------------------------------------------------------------------------

INDEX_RE = re.compile(r"^\s*([^\s+-]+)\s*(?:([+-])\s*(\d+)\s*c(?:hars?)?)?\s*$")


class Noop:
    def __getattr__(self, name):
        return self

    def __call__(self, *args, **kwargs):
        return self

    def __bool__(self):
        return False


class Text:
    """String-backed stand-in for a tkinter Text widget."""

    def __init__(self, content=""):
        # Tk always keeps one trailing newline in the buffer.
        self.buf = content + "\n"

    def content(self):
        return self.buf[:-1]

    def offset(self, index):
        m = INDEX_RE.match(str(index))
        if not m:
            raise ValueError('bad text index "%s"' % index)
        base, sign, count = m.groups()
        if base in ("end",):
            pos = len(self.buf)
        elif base in ("insert", "current"):
            pos = len(self.buf) - 1
        elif "." in base:
            line_s, col_s = base.split(".", 1)
            lines = self.buf.split("\n")
            line = max(1, int(line_s))
            if line > len(lines):
                pos = len(self.buf)
            else:
                start = sum(len(l) + 1 for l in lines[: line - 1])
                width = len(lines[line - 1])
                col = width if col_s == "end" else min(int(col_s), width)
                pos = start + col
        else:
            raise ValueError('bad text index "%s"' % index)
        if sign:
            pos = pos + int(count) if sign == "+" else pos - int(count)
        return max(0, min(pos, len(self.buf)))

    def get(self, start, end=None):
        a = self.offset(start)
        b = a + 1 if end is None else self.offset(end)
        return self.buf[a:b] if b > a else ""

    def delete(self, start, end=None):
        limit = len(self.buf) - 1
        a = min(self.offset(start), limit)
        b = a + 1 if end is None else self.offset(end)
        b = min(b, limit)
        if b > a:
            self.buf = self.buf[:a] + self.buf[b:]

    def insert(self, index, chars, *tags):
        a = min(self.offset(index), len(self.buf) - 1)
        self.buf = self.buf[:a] + str(chars) + self.buf[a:]

    def __getattr__(self, name):
        return Noop()


class Editor:
    """The object generated editor actions receive as ``self``."""

    def __init__(self, host):
        self.host = host
        self.text = host.text
        self.text_area = host.text
        self.textArea = host.text
        self.filename = None
        self.current_file = None
        self.file_path = None
        self.root = Noop()
        self.master = Noop()

    def __getattr__(self, name):
        return Noop()


class EditorHost:
    def __init__(self, state):
        self.files = dict(state.get("files") or {})
        self.open_path = state.get("open_path")
        self.save_path = state.get("save_path")
        self.confirm = bool(state.get("confirm", True))
        self.answer = state.get("answer")
        self.effects = []
        self.text = Text(state.get("document") or "")
        self.editor = Editor(self)
        self.modules = self.build_modules()

    def effect(self, kind, **fields):
        entry = {"kind": kind}
        entry.update({k: v for k, v in fields.items() if v is not None})
        self.effects.append(entry)

    def open(self, path, mode="r", *args, **kwargs):
        path = str(path)
        binary = "b" in mode
        if any(flag in mode for flag in "wax"):
            host = self
            initial = self.files.get(path, "") if "a" in mode else ""
            if "x" in mode and path in self.files:
                raise FileExistsError(17, "File exists", path)

            class Writer(io.StringIO):
                def write(self, s):
                    if isinstance(s, (bytes, bytearray)):
                        s = s.decode("utf-8")
                    return super().write(s)

                def close(self):
                    if not self.closed:
                        host.files[path] = initial + self.getvalue()
                        host.effect("write", path=path)
                    super().close()

            return Writer()
        if path not in self.files:
            raise FileNotFoundError(2, "No such file or directory", path)
        self.effect("read", path=path)
        data = self.files[path]
        return io.BytesIO(data.encode("utf-8")) if binary else io.StringIO(data)

    def build_modules(self):
        host = self
        tk = types.ModuleType("tkinter")
        constants = {
            "END": "end", "INSERT": "insert", "CURRENT": "current", "WORD": "word",
            "BOTH": "both", "YES": True, "NO": False, "LEFT": "left", "RIGHT": "right",
            "TOP": "top", "BOTTOM": "bottom", "X": "x", "Y": "y", "NONE": "none",
        }
        for k, v in constants.items():
            setattr(tk, k, v)
        tk.Text = Text
        tk.Tk = Noop
        tk.Menu = Noop
        tk.Frame = Noop
        tk.Scrollbar = Noop
        tk.Toplevel = Noop
        tk.TclError = type("TclError", (Exception,), {})
        tk.__all__ = list(constants) + ["Text", "Tk", "Menu", "Frame", "Scrollbar", "Toplevel", "TclError"]

        fd = types.ModuleType("tkinter.filedialog")

        def askopenfilename(**kw):
            host.effect("askopenfilename", title=kw.get("title"))
            return host.open_path or ""

        def asksaveasfilename(**kw):
            host.effect("asksaveasfilename", title=kw.get("title"))
            return host.save_path or ""

        def askopenfile(mode="r", **kw):
            path = askopenfilename(**kw)
            return host.open(path, mode) if path else None

        def asksaveasfile(mode="w", **kw):
            path = asksaveasfilename(**kw)
            return host.open(path, mode) if path else None

        fd.askopenfilename = askopenfilename
        fd.asksaveasfilename = asksaveasfilename
        fd.askopenfile = askopenfile
        fd.asksaveasfile = asksaveasfile

        mb = types.ModuleType("tkinter.messagebox")

        def shower(kind):
            def show(title=None, message=None, **kw):
                host.effect(kind, title=title, message=message)
                return "ok"
            return show

        def asker(kind, yes, no):
            def ask(title=None, message=None, **kw):
                host.effect(kind, title=title, message=message)
                return yes if host.confirm else no
            return ask

        mb.showinfo = shower("showinfo")
        mb.showwarning = shower("showwarning")
        mb.showerror = shower("showerror")
        mb.askyesno = asker("askyesno", True, False)
        mb.askokcancel = asker("askokcancel", True, False)
        mb.askretrycancel = asker("askretrycancel", True, False)
        mb.askyesnocancel = asker("askyesnocancel", True, False)
        mb.askquestion = asker("askquestion", "yes", "no")

        sd = types.ModuleType("tkinter.simpledialog")

        def askstring(title=None, prompt=None, **kw):
            host.effect("askstring", title=title, message=prompt)
            return host.answer

        sd.askstring = askstring

        tk.filedialog = fd
        tk.messagebox = mb
        tk.simpledialog = sd
        return {"tkinter": tk, "tkinter.filedialog": fd,
                "tkinter.messagebox": mb, "tkinter.simpledialog": sd}

    def install(self):
        sys.modules.update(self.modules)

    def seed(self, ns):
        tk = self.modules["tkinter"]
        for name in tk.__all__:
            ns[name] = getattr(tk, name)
        ns["tk"] = tk
        ns["filedialog"] = self.modules["tkinter.filedialog"]
        ns["messagebox"] = self.modules["tkinter.messagebox"]
        ns["open"] = self.open

    def report(self):
        return {"document": self.text.content(), "files": self.files, "effects": self.effects}


def defined_functions(ns):
    return [
        name
        for name, value in ns.items()
        if isinstance(value, types.FunctionType)
        and value.__name__ == name
        and value.__globals__ is ns
    ]


def wants_self(fn, nargs):
    try:
        params = list(inspect.signature(fn).parameters.values())
    except (TypeError, ValueError):
        return False
    if not params or params[0].name != "self":
        return False
    required = [
        p for p in params
        if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD) and p.default is p.empty
    ]
    return nargs < len(required)


def execute(req):
    host = EditorHost(req["host"]) if req.get("host") is not None else None
    scopes = {}

    def scope(name):
        if name not in scopes:
            ns = {"__name__": "__dco_block__", "__builtins__": builtins}
            if host is not None:
                host.seed(ns)
            scopes[name] = ns
        return scopes[name]

    if host is not None:
        host.install()
    reply = {}
    phase = "load"
    try:
        for unit in req.get("units", []):
            code = marshal.loads(base64.b64decode(unit["code"]))
            exec(code, scope(unit["scope"]))
        reply["defined"] = {s: defined_functions(scope(s)) for s in req.get("report", [])}
        call = req.get("call")
        value = None
        if call is not None:
            phase = "call"
            fn = scopes.get(call["scope"], {}).get(call["name"])
            if fn is None or not callable(fn):
                reply.update(status="missing", name=call["name"])
                return finish(reply, host)
            args = []
            for arg in call.get("args", []):
                if "fn" in arg:
                    ref = arg["fn"]
                    target = scopes.get(ref["scope"], {}).get(ref["name"])
                    if target is None:
                        reply.update(status="missing", name=ref["name"])
                        return finish(reply, host)
                    args.append(target)
                else:
                    args.append(arg.get("value"))
            if host is not None and wants_self(fn, len(args)):
                args.insert(0, host.editor)
            value = fn(*args)
        reply.update(status="ok", value=marshal_value(value))
    except BaseException as e:
        reply.update(
            status="runtime_error",
            phase=phase,
            exception=type(e).__name__,
            message=describe(e),
            line=block_line(e),
        )
    return finish(reply, host)


def finish(reply, host):
    if host is not None:
        reply["host"] = host.report()
    return reply


def serve():
    proto_in = os.fdopen(os.dup(0), "r", encoding="utf-8")
    proto_out = os.fdopen(os.dup(1), "w", encoding="utf-8")
    devnull = os.open(os.devnull, os.O_RDWR)
    os.dup2(devnull, 0)
    os.dup2(devnull, 1)
    quiet = sys.stdout
    sys.stdin = io.StringIO("")
    sys.argv = ["dco-worker"]

    for line in proto_in:
        line = line.strip()
        if not line:
            continue
        modules = set(sys.modules)
        saved_builtins = dict(builtins.__dict__)
        capture = io.StringIO()
        sys.stdout = capture
        sys.stderr = capture
        try:
            req = json.loads(line)
            op = req.get("op")
            if op == "compile":
                reply = compile_source(req)
            elif op == "execute":
                reply = execute(req)
            else:
                reply = {"status": "protocol_error", "message": "unknown op %r" % (op,)}
        except BaseException as e:
            reply = {"status": "protocol_error", "message": describe(e)}
        finally:
            sys.stdout = quiet
            sys.stderr = sys.__stderr__
            for name in set(sys.modules) - modules:
                del sys.modules[name]
            builtins.__dict__.clear()
            builtins.__dict__.update(saved_builtins)
        reply["stdout"] = capture.getvalue()[:OUTPUT_LIMIT]
        try:
            data = json.dumps(reply)
        except (TypeError, ValueError) as e:
            data = json.dumps({"status": "protocol_error", "message": describe(e)})
        proto_out.write(data + "\n")
        proto_out.flush()


if __name__ == "__main__":
    serve()
