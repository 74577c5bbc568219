import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

METHOD = """
    public int {name}(int[] {arr}, String {label}) {{
        int {acc} = {init};
        for (int i = 0; i < {arr}.length; i++) {{
            if ({arr}[i] > {limit}) {{
                {acc} += {arr}[i];
            }} else {{
                {acc} -= {step};
            }}
        }}
        System.out.println("{msg}" + {label});
        return {acc};
    }}
"""


def write_java_tree(root: Path, n_files: int = 24, seed: int = 0) -> Path:
    """A deterministic tree of small, valid Java classes."""
    rng = np.random.default_rng(seed)
    names = ["total", "count", "sum", "value", "result", "size", "index", "score"]
    for f in range(n_files):
        pkg = root / f"proj{f % 3}" / "src"
        pkg.mkdir(parents=True, exist_ok=True)
        body = []
        for m in range(int(rng.integers(3, 7))):
            body.append(METHOD.format(
                name=f"compute{m}", arr=str(rng.choice(["data", "items", "xs"])),
                label=str(rng.choice(["tag", "name"])), acc=str(rng.choice(names)),
                init=int(rng.integers(0, 9)), limit=int(rng.integers(0, 100)),
                step=int(rng.integers(1, 5)), msg=f"done {m}",
            ))
        src = f"// file {f}\npublic class Worker{f} {{\n" + "".join(body) + "}\n"
        (pkg / f"Worker{f}.java").write_text(src)
    return root


@pytest.fixture
def java_tree(tmp_path):
    return write_java_tree(tmp_path / "src_tree")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
