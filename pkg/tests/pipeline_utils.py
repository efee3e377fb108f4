"""Small end-to-end pipeline driven through the CLI."""

from pathlib import Path

from tavit.cli import main

TINY_CONFIG = """\
# fast pipeline for tests: a few patients at 16x16
patients = 16
slices = 4
image_size = 16
channels = 4,4,8
embed_dim = 8
heads = 2
layers = 1
mlp_ratio = 2
layernorm_sqrt = true
epochs = 2
batch_size = 4
lr = 1e-3
"""

STEPS = [
    ["gen-data"],
    ["train", "seg"],
    ["train", "latent"],
    ["train", "tavit", "--variant", "tavit-t1w-flair"],
    ["infer", "--variant", "tavit-t1w-flair"],
    ["train", "tavit", "--variant", "mprvit"],
    ["infer", "--variant", "mprvit"],
    ["evaluate"],
    ["report"],
]


def write_config(root: Path, text: str = TINY_CONFIG, **extra) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    body = text + "".join(f"{k} = {v}\n" for k, v in extra.items())
    body += f"data_dir = {root / 'data'}\nout_dir = {root / 'runs'}\n"
    path = root / "run.cfg"
    path.write_text(body)
    return path


def run_pipeline(root: Path, seed: int = 0, config_text: str = TINY_CONFIG) -> Path:
    """Run every stage; returns the report directory."""
    cfg = write_config(root, config_text, seed=seed)
    for step in STEPS:
        code = main(step + ["--config", str(cfg)])
        if code != 0:
            raise AssertionError(f"step {step} exited with {code}")
    return root / "runs" / "report"
