import hashlib
import json
import time
from pathlib import Path

from mesa.time import BaseScheduler

from .exceptions import FormatError


class BaseSchedulerByTypeFiltered(BaseScheduler):
    """
    A scheduler that overrides the step method to allow for filtering
    of agents by .agt_type.

    Example:
    -------
    >>> scheduler = BaseSchedulerByTypeFiltered(panel)
    >>> scheduler.step(agt_type="Judge")
    """

    def step(self, agt_type=None):
        """Execute the step of all the agents of a type, one at a time."""
        self.do_each(method="step", agt_type=agt_type)
        self.steps += 1
        self.time += 1

    def do_each(self, method, agent_keys=None, shuffle=False, agt_type=None):
        if agent_keys is None:
            agent_keys = self.get_agent_keys()
        if agt_type is not None:
            agent_keys = [i for i in agent_keys if self._agents[i].agt_type == agt_type]
        if shuffle:
            self.model.random.shuffle(agent_keys)
        for agent_key in agent_keys:
            if agent_key in self._agents:
                getattr(self._agents[agent_key], method)()


def get_agt_attr(attr_str):
    """Get a nested attribute from an agent object.

    Returns None if the attribute does not exist for the given agent type,
    which lets one DataCollector serve judges and tie-breakers alike.

    Parameters
    ----------
    attr_str : str
        A string of nested attributes separated by a period.

    Returns
    -------
    function
        A function that returns the nested attribute.
    """

    def get_nested_attr(obj):
        def get_nested_attr_(obj, attr_str):
            attrs = attr_str.split(".", 1)
            current_attr = getattr(obj, attrs[0], None)
            if len(attrs) == 1 or current_attr is None:
                return current_attr
            return get_nested_attr_(current_attr, attrs[1])

        return get_nested_attr_(obj, attr_str)

    return get_nested_attr


class TimeRecorder:
    """A class for recording time."""

    def __init__(self):
        self.start = time.monotonic()
        self._last_lap = self.start

    def lap(self):
        """Return seconds since the last lap (or the start) and reset the lap."""
        now = time.monotonic()
        elapsed = now - self._last_lap
        self._last_lap = now
        return elapsed

    @staticmethod
    def sec2str(secs, fmt="%H:%M:%S"):
        """Convert seconds to string format."""
        return time.strftime(fmt, time.gmtime(secs))


# Canonical serialisation. Identical inputs must give identical bytes, so
# keys are sorted and separators fixed; floats use repr (shortest round trip).
def canonical_dumps(obj, indent=None) -> str:
    if indent is None:
        return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return json.dumps(obj, sort_keys=True, indent=indent, ensure_ascii=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_text(text: str) -> str:
    return sha256_bytes(text.encode("utf-8"))


def sha256_obj(obj) -> str:
    """Hash any JSON-serialisable object through its canonical form."""
    return sha256_text(canonical_dumps(obj))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(obj, path, indent=2):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_dumps(obj, indent=indent) + "\n", encoding="utf-8")


def read_json(path):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(e.msg, path=str(path), line=e.lineno, offset=e.colno) from e


def write_jsonl(records, path):
    """Write one canonical JSON object per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(canonical_dumps(rec) + "\n")


def iter_jsonl(path, required=()):
    """Yield (line number, object) pairs, skipping blank lines.

    Parameters
    ----------
    path : str or Path
        The JSONL file.
    required : tuple of str, optional
        Keys every record must carry.

    Raises
    ------
    FormatError
        On a line that is not a JSON object, or that lacks a required key,
        with its line number.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(e.msg, path=str(path), line=lineno, offset=e.colno) from e
            if not isinstance(obj, dict):
                raise FormatError("expected a JSON object", path=str(path), line=lineno)
            missing = [k for k in required if k not in obj]
            if missing:
                raise FormatError(f"missing key(s) {', '.join(missing)}", path=str(path), line=lineno)
            yield lineno, obj


def read_jsonl(path, required=()):
    return [obj for _, obj in iter_jsonl(path, required)]
