"""
SMS 切片扩散重建命令行入口。

子命令: simulate → calibrate → recon-sgsp / train-score → recon-diffusion → metrics / plot
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from sms_diffusion import (
    ComplexTensor4,
    CompositeH,
    Domain,
    ScoreNet,
    SelfConsistencyProjection,
    VESchedule,
    atomic_write_json,
    build_dataset,
    canonical_json,
    compute_metrics,
    fit_kernels,
    load_checkpoint,
    load_kernel_set,
    load_plan,
    make_score_fn,
    nmse,
    read_tensor,
    reverse_sample,
    save_checkpoint,
    save_kernel_set,
    save_plan,
    save_slice_pngs,
    sgsp_reconstruct,
    simulate,
    train,
    write_tensor,
    SamplingOperator,
)
from utils import (
    get_settings,
    handle_exception,
    load_run_config,
    logger,
    setup_logging,
    ConfigError,
    InvalidArgumentError,
    RunConfig,
)

SPIRIT_FILE = "spirit.ct4f"
GRAPPA_FILE = "slice_grappa.ct4f"
CHECKPOINT_FILE = "score.ct4f"


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON 运行配置文件")
    parser.add_argument("--seed", type=int, help="随机种子（随机性命令必需）")
    parser.add_argument("--out-dir", dest="out_dir", help="输出目录")
    parser.add_argument("--debug", action="store_true", help="输出调试日志")


def _add_inputs(parser: argparse.ArgumentParser, *names: str):
    for name in names:
        parser.add_argument(f"--{name}", help=f"输入文件: {name}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sms_cli", description="SMS slice-diffusion reconstruction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="生成体模、线圈、采样计划和 SMS 测量")
    _add_common(p)
    p.add_argument("--n-slice", type=int)
    p.add_argument("--n-coil", type=int)
    p.add_argument("--grid", type=int, nargs=2)
    p.add_argument("--shape-family", choices=["ellipses", "blobs"])
    p.add_argument("--accel", type=int)
    p.add_argument("--acs-lines", type=int)
    p.add_argument("--caipi-increment", type=float)
    p.add_argument("--noise-std", type=float)

    p = sub.add_parser("calibrate", help="拟合 SPIRiT 与 slice-GRAPPA 卷积核")
    _add_common(p)
    _add_inputs(p, "calib", "plan")
    p.add_argument("--kernel-size", type=int, nargs=2)
    p.add_argument("--tikhonov", type=float)

    p = sub.add_parser("recon-sgsp", help="SGSP 基线重建")
    _add_common(p)
    _add_inputs(p, "y", "plan", "kernels", "truth")
    p.add_argument("--solver", choices=["gradient", "cg"])
    p.add_argument("--max-iters", type=int)
    p.add_argument("--data-weight", type=float)

    p = sub.add_parser("train-score", help="训练分数网络")
    _add_common(p)
    _add_inputs(p, "kernels")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-phantoms", type=int)

    p = sub.add_parser("recon-diffusion", help="自洽扩散重建")
    _add_common(p)
    _add_inputs(p, "y", "plan", "kernels", "checkpoint", "init", "truth")
    p.add_argument("--n-steps", type=int)
    p.add_argument("--dc-weight", type=float)
    p.add_argument("--mu", type=float)

    p = sub.add_parser("metrics", help="计算 NMSE / PSNR")
    _add_common(p)
    _add_inputs(p, "recon", "truth")

    p = sub.add_parser("plot", help="逐切片导出幅值 PNG")
    _add_common(p)
    _add_inputs(p, "tensor")
    p.add_argument("--out", help="PNG 路径前缀")
    return parser


# 命令行参数 → 配置覆盖项（参数名, 配置段, 字段）
_FLAG_MAP = [
    ("n_slice", "phantom", "n_slice"),
    ("n_coil", "phantom", "n_coil"),
    ("grid", "phantom", "grid"),
    ("shape_family", "phantom", "shape_family"),
    ("accel", "sampling", "accel"),
    ("acs_lines", "sampling", "acs_lines"),
    ("caipi_increment", "sampling", "caipi_increment"),
    ("noise_std", "sampling", "noise_std"),
    ("kernel_size", "calibration", "kernel_size"),
    ("tikhonov", "calibration", "tikhonov"),
    ("solver", "sgsp", "solver"),
    ("max_iters", "sgsp", "max_iters"),
    ("data_weight", "sgsp", "data_weight"),
    ("steps", "train", "steps"),
    ("batch_size", "train", "batch_size"),
    ("n_phantoms", "train", "n_phantoms"),
    ("n_steps", "schedule", "n_steps"),
    ("dc_weight", "sampler", "dc_weight"),
    ("mu", "projection", "mu"),
    ("y", "inputs", "y"),
    ("plan", "inputs", "plan"),
    ("calib", "inputs", "calib"),
    ("kernels", "inputs", "kernels"),
    ("checkpoint", "inputs", "checkpoint"),
    ("truth", "inputs", "truth"),
    ("init", "inputs", "init"),
    ("recon", "inputs", "recon"),
    ("tensor", "inputs", "tensor"),
]


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """
    合并配置文件与命令行参数。
    :param args: 解析后的命令行参数
    :return: 校验后的 RunConfig
    """
    overrides: Dict[str, Any] = {}
    for flag, section, key in _FLAG_MAP:
        value = getattr(args, flag, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = list(value) if isinstance(value, list) else value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    return load_run_config(args.config, overrides)


def _require_seed(config: RunConfig, command: str) -> int:
    if config.seed is None:
        raise ConfigError(f"'{command}' is stochastic: set 'seed' in the run file or pass --seed")
    return config.seed


def _require_input(config: RunConfig, name: str) -> str:
    value = getattr(config.inputs, name)
    if value is None:
        raise ConfigError(f"Missing input '{name}': set inputs.{name} in the run file or pass --{name}")
    return value


def _out(config: RunConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_report(config: RunConfig, name: str, document: Dict[str, Any]) -> Path:
    out = _out(config)
    atomic_write_json(out / "resolved_config.json", json.loads(config.resolved()))
    return atomic_write_json(out / name, {"config_hash": config.config_hash(), **document})


def _load_operator(config: RunConfig, grid):
    kernel_dir = Path(_require_input(config, "kernels"))
    spirit = load_kernel_set(kernel_dir / SPIRIT_FILE)
    grappa = load_kernel_set(kernel_dir / GRAPPA_FILE)
    return CompositeH(spirit, grappa, grid)


def _read_image(path: str, name: str) -> ComplexTensor4:
    tensor = read_tensor(path)
    if tensor.domain != Domain.IMAGE:
        raise InvalidArgumentError(f"{name} must be an image-domain tensor")
    return tensor


def cmd_simulate(config: RunConfig) -> Dict[str, Any]:
    """
    生成回顾性 SMS 实验数据。
    :param config: 运行配置
    :return: 运行摘要
    """
    seed = _require_seed(config, "simulate")
    spec = config.phantom.model_copy(update={"seed": seed})
    sampling = config.sampling
    result = simulate(spec, sampling.accel, sampling.acs_lines, sampling.caipi_increment, sampling.noise_std)

    out = _out(config)
    write_tensor(result.truth, out / "truth.ct4f")
    write_tensor(result.coil_images, out / "coil_images.ct4f")
    write_tensor(ComplexTensor4(result.maps, Domain.IMAGE), out / "coil_maps.ct4f")
    write_tensor(result.y, out / "y.ct4f")
    write_tensor(result.calib_slices, out / "calib.ct4f")
    save_plan(result.plan, out / "plan.json")

    zero_filled = SamplingOperator(result.plan, spec.n_slice).zero_filled(result.y.data)
    return _write_report(
        config,
        "simulate.json",
        {
            "sampled_lines": int(result.plan.lines.sum()),
            "zero_filled_nmse": nmse(zero_filled, result.coil_images),
            "files": ["truth.ct4f", "coil_images.ct4f", "coil_maps.ct4f", "y.ct4f", "calib.ct4f", "plan.json"],
        },
    )


def cmd_calibrate(config: RunConfig) -> Dict[str, Any]:
    """
    由 ACS 数据拟合两类卷积核。
    :param config: 运行配置
    :return: 运行摘要
    """
    plan = load_plan(_require_input(config, "plan"))
    calib = read_tensor(_require_input(config, "calib"))
    kernels = fit_kernels(calib, plan, tuple(config.calibration.kernel_size), config.calibration.tikhonov)

    out = _out(config)
    provenance = {"config_hash": config.config_hash()}
    save_kernel_set(kernels.spirit, out / SPIRIT_FILE, provenance)
    save_kernel_set(kernels.slice_grappa, out / GRAPPA_FILE, provenance)
    return _write_report(
        config,
        "calibrate.json",
        {
            "spirit_residuals": kernels.spirit.residuals,
            "slice_grappa_residuals": kernels.slice_grappa.residuals,
            "files": [SPIRIT_FILE, GRAPPA_FILE],
        },
    )


def _truth_metrics(config: RunConfig, x: np.ndarray) -> Optional[Dict[str, Any]]:
    if config.inputs.truth is None:
        return None
    return compute_metrics(x, _read_image(config.inputs.truth, "truth").data)


def cmd_recon_sgsp(config: RunConfig) -> Dict[str, Any]:
    """
    SGSP 基线重建。
    :param config: 运行配置
    :return: 运行摘要
    """
    plan = load_plan(_require_input(config, "plan"))
    y = read_tensor(_require_input(config, "y"))
    H = _load_operator(config, plan.grid)
    result = sgsp_reconstruct(y, plan, H, config.sgsp)

    out = _out(config)
    write_tensor(ComplexTensor4(result.x, Domain.IMAGE), out / "recon_sgsp.ct4f")
    return _write_report(
        config,
        "sgsp_log.json",
        {
            "solver": result.solver,
            "converged": result.converged,
            "log": result.log,
            "metrics": _truth_metrics(config, result.x),
        },
    )


def cmd_train_score(config: RunConfig) -> Dict[str, Any]:
    """
    训练分数网络并保存检查点。
    :param config: 运行配置
    :return: 运行摘要
    """
    seed = _require_seed(config, "train-score")
    spec = config.phantom.model_copy(update={"seed": seed})
    train_cfg = config.train.model_copy(update={"seed": seed})
    schedule = VESchedule.from_config(config.schedule)
    H = _load_operator(config, tuple(spec.grid))
    projector = SelfConsistencyProjection(H, config.projection)

    dataset = build_dataset(spec, train_cfg.n_phantoms)
    net = ScoreNet(spec.n_slice, spec.n_coil, config.score_net, seed=seed)
    out = _out(config)
    metadata = {"schedule": config.schedule.model_dump(mode="json"), "config_hash": config.config_hash()}
    result = train(
        net, dataset, schedule, projector, train_cfg, out / CHECKPOINT_FILE, config.schedule.eps, metadata
    )
    save_checkpoint(result.net, out / CHECKPOINT_FILE, {**metadata, "seed": seed, "step": result.steps})
    return _write_report(config, "train_log.json", {"losses": result.losses, "files": [CHECKPOINT_FILE]})


def cmd_recon_diffusion(config: RunConfig) -> Dict[str, Any]:
    """
    自洽扩散重建（反向 SDE 采样）。
    :param config: 运行配置
    :return: 运行摘要
    """
    seed = _require_seed(config, "recon-diffusion")
    plan = load_plan(_require_input(config, "plan"))
    y = read_tensor(_require_input(config, "y"))
    H = _load_operator(config, plan.grid)
    net, meta = load_checkpoint(_require_input(config, "checkpoint"))
    if meta.get("schedule") not in (None, config.schedule.model_dump(mode="json")):
        logger.warning("Checkpoint was trained with a different noise schedule")
    schedule = VESchedule.from_config(config.schedule)

    x_init = None
    if config.inputs.init is not None:
        x_init = _read_image(config.inputs.init, "init").data
    elif config.sampler.init == "sgsp":
        x_init = sgsp_reconstruct(y, plan, H, config.sgsp).x

    truth = _read_image(config.inputs.truth, "truth").data if config.inputs.truth else None
    result = reverse_sample(
        y,
        plan,
        H,
        make_score_fn(net, schedule),
        schedule,
        np.random.default_rng(seed),
        config.sampler,
        config.projection,
        x_init=x_init,
        n_steps=config.schedule.n_steps,
        eps=config.schedule.eps,
        truth=truth,
    )

    out = _out(config)
    write_tensor(ComplexTensor4(result.x, Domain.IMAGE), out / "recon_diffusion.ct4f")
    return _write_report(
        config,
        "diffusion_log.json",
        {
            "trajectory": result.trajectory,
            "clipped_steps": result.clipped_steps,
            "metrics": _truth_metrics(config, result.x),
        },
    )


def cmd_metrics(config: RunConfig) -> Dict[str, Any]:
    """
    计算重建结果与真值之间的 NMSE 和 PSNR。
    :param config: 运行配置
    :return: 指标字典
    """
    recon = read_tensor(_require_input(config, "recon"))
    truth = read_tensor(_require_input(config, "truth"))
    return _write_report(config, "metrics.json", compute_metrics(recon, truth))


def cmd_plot(config: RunConfig, out_path: Optional[str] = None) -> Path:
    """
    逐切片导出幅值灰度图。
    :param config: 运行配置
    :param out_path: PNG 路径前缀，默认为输出目录下的 plot.png
    :return: 报告文件路径（含写出的 PNG 列表）
    """
    tensor = read_tensor(_require_input(config, "tensor"))
    target = Path(out_path) if out_path else _out(config) / "plot.png"
    paths = save_slice_pngs(tensor, target)
    return _write_report(config, "plot.json", {"files": [str(p) for p in paths]})


COMMANDS: Dict[str, Callable[[RunConfig], Any]] = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "recon-sgsp": cmd_recon_sgsp,
    "train-score": cmd_train_score,
    "recon-diffusion": cmd_recon_diffusion,
    "metrics": cmd_metrics,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    命令行主函数。
    :param argv: 参数列表，默认读取 sys.argv
    :return: 退出码
    """
    args = build_parser().parse_args(argv)

    try:
        settings = get_settings()
        setup_logging(args.debug or settings.debug_mode, settings.log_dir)
        config = resolve_config(args)
        if args.command == "plot":
            report = cmd_plot(config, args.out)
        else:
            report = COMMANDS[args.command](config)
        summary = json.loads(Path(report).read_text(encoding="utf-8"))
        sys.stdout.write(canonical_json(summary))
        return 0
    except Exception as e:
        error = handle_exception(e)
        sys.stderr.write(canonical_json(error))
        return error["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
