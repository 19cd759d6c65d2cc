"""Write the two scalability traces into traces/."""

from pathlib import Path

TRACES = Path(__file__).resolve().parent.parent / "traces"


def managed(groups=1000):
    lines = ["# One page group per vkey, far more groups than hardware keys.", "T1 init 1.0"]
    for v in range(groups):
        lines.append(f"T1 mmap {v} 4096 rw")
    for v in range(groups):
        lines.append(f"T1 begin {v} rw")
        lines.append(f"T1 write @{v}")
        lines.append(f"T1 end {v}")
    for v in range(0, groups, 10):
        lines.append(f"T1 mprotect {v} ro")
        lines.append(f"T1 read @{v}")
    return "\n".join(lines) + "\n"


def raw(calls=16):
    lines = ["# Key 0 is taken, so only 15 allocations can succeed."]
    lines += ["T1 raw_pkey_alloc"] * calls
    return "\n".join(lines) + "\n"


if __name__ == "__main__":
    (TRACES / "scale_managed.trace").write_text(managed())
    (TRACES / "scale_raw.trace").write_text(raw())
