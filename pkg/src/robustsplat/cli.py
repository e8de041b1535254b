"""Command-line surface: dataset generation, training, rendering, evaluation.

Exit codes: 0 success, 1 runtime failure, 2 usage or I/O error. Heavy imports
happen inside the command handlers so the thread cap set from --threads (or the
THREADS environment variable) is in place before the numeric stack loads.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

TOOL_VERSION = '0.1.0'


def _set_threads(n: int) -> None:
    for var in ('OPENBLAS_NUM_THREADS', 'OMP_NUM_THREADS', 'MKL_NUM_THREADS',
                'NUMEXPR_NUM_THREADS'):
        os.environ.setdefault(var, str(n))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog='robustsplat',
                                description='Distractor-robust CPU Gaussian '
                                            'splatting toolkit')
    p.add_argument('--threads', type=int,
                   default=int(os.environ.get('THREADS', '1')),
                   help='worker/BLAS thread cap (default 1, or THREADS env)')
    sub = p.add_subparsers(dest='command', required=True)

    g = sub.add_parser('gen', help='generate a synthetic benchmark dataset')
    g.add_argument('out_dir')
    g.add_argument('--preset', default='medium',
                   choices=['clean', 'low', 'medium', 'high'])
    g.add_argument('--seed', type=int, default=0)
    g.add_argument('--size', default='64x64', help='WxH image size')
    g.add_argument('--train-views', type=int, default=40)
    g.add_argument('--test-views', type=int, default=10)
    g.add_argument('--exposure-jitter', action='store_true',
                   help='apply per-frame gain/bias to train views')

    f = sub.add_parser('fit', help='train a splat model on a dataset')
    f.add_argument('dataset')
    f.add_argument('--out', required=True, help='checkpoint output directory')
    f.add_argument('--method', default='vanilla',
                   choices=['vanilla', 'filter', 'agg', 'mlp'])
    f.add_argument('--iters', type=int, default=30_000)
    f.add_argument('--seed', type=int, default=0)
    f.add_argument('--features', default='oracle', choices=['oracle', 'synth'],
                   help='feature source for agg/mlp masking')
    f.add_argument('--clusters', type=int, default=100)
    f.add_argument('--tau', type=float, default=0.5)
    f.add_argument('--lambda-reg', type=float, default=0.5)
    f.add_argument('--kappa', type=float, default=1e-8)
    f.add_argument('--sh-degree', type=int, default=1, choices=[0, 1, 2, 3])
    f.add_argument('--beta1', type=float, default=3e-4,
                   help='warm-up decay rate (3e-3 for high-occlusion scenes)')
    f.add_argument('--beta2', type=float, default=1.5)
    f.add_argument('--no-ubp', action='store_true',
                   help='disable utilization pruning; restores the classic '
                        'opacity reset (ablation)')
    f.add_argument('--no-warmup', action='store_true',
                   help='disable the mask warm-up schedule (ablation)')
    f.add_argument('--no-appearance', action='store_true')
    f.add_argument('--dump-masks', action='store_true',
                   help='write final per-train-view masks into the checkpoint')

    r = sub.add_parser('render', help='render a checkpoint from given cameras')
    r.add_argument('checkpoint')
    r.add_argument('--cameras', required=True,
                   help='cameras .txt file or a dataset directory')
    r.add_argument('--split', default='test', choices=['test', 'train'],
                   help='which cameras to use when --cameras is a dataset dir')
    r.add_argument('--out', required=True)
    r.add_argument('--latent', default='mean', choices=['mean', 'train', 'none'],
                   help='appearance latent: trained-view latents, their mean, '
                        'or the identity transform')

    e = sub.add_parser('eval', help='evaluate a checkpoint against a dataset')
    e.add_argument('checkpoint')
    e.add_argument('dataset')
    e.add_argument('--out', default=None, help='metrics CSV path '
                   '(default: <checkpoint>/eval.csv)')
    return p


def cmd_gen(args) -> int:
    from . import io
    from .datagen import generate, preset_spec, save_dataset
    try:
        w, h = (int(v) for v in args.size.lower().split('x'))
    except ValueError:
        print(f"error: bad --size {args.size!r}, expected WxH", file=sys.stderr)
        return 2
    spec = preset_spec(args.preset, seed=args.seed, width=w, height=h,
                       n_train=args.train_views, n_test=args.test_views,
                       exposure_jitter=args.exposure_jitter)
    gen = generate(spec)
    save_dataset(gen, args.out_dir)
    out = Path(args.out_dir)
    manifest = io.read_manifest(out / 'manifest.txt')
    manifest.update({'command': 'gen', 'preset': args.preset,
                     'content_hash': io.content_hash(
                         sorted((out / 'train').glob('*.png')))})
    io.write_manifest(out / 'manifest.txt', manifest)
    print(f"dataset written to {out} "
          f"({spec.n_train} train / {spec.n_test} test views)")
    return 0


def _dataset_hash(ds_root: Path, io_mod) -> str:
    files = [ds_root / 'cameras_train.txt', ds_root / 'cameras_test.txt',
             ds_root / 'points.txt']
    files += sorted((ds_root / 'train').glob('*.png'))
    return io_mod.content_hash([f for f in files if f.exists()])


def cmd_fit(args) -> int:
    from . import io
    from .checkpoint import save_checkpoint
    from .trainer import TrainConfig, Trainer

    dataset = io.load_dataset(args.dataset)
    config = TrainConfig(
        method=args.method, iterations=args.iters, seed=args.seed,
        sh_degree=args.sh_degree, tau=args.tau,
        warmup=not args.no_warmup, warmup_beta1=args.beta1,
        warmup_beta2=args.beta2, use_ubp=not args.no_ubp,
        opacity_reset=args.no_ubp, kappa=args.kappa,
        appearance=not args.no_appearance, lambda_reg=args.lambda_reg,
        clusters=args.clusters, feature_source=args.features,
    )
    if config.method in ('agg', 'mlp') and config.feature_source == 'oracle' \
            and not dataset.feature_paths:
        print("error: dataset has no feature maps (features/*.fmap); "
              "re-generate the dataset or pass --features synth to derive "
              "them from the images", file=sys.stderr)
        return 2

    trainer = Trainer(dataset, config)
    report = trainer.run()
    results = trainer.evaluate()
    if results:
        import numpy as np
        report.final_metrics = {
            'psnr': float(np.mean([r['psnr'] for r in results])),
            'ssim': float(np.mean([r['ssim'] for r in results])),
        }
    masks = trainer.final_masks() if args.dump_masks else None
    extra = {'command': 'fit', 'dataset': str(Path(args.dataset).name),
             'input_hash': _dataset_hash(Path(args.dataset), io),
             'threads': args.threads}
    save_checkpoint(args.out, trainer.cloud, trainer.appearance,
                    trainer.classifier, config, report,
                    extra_manifest=extra, masks=masks)
    if report.final_metrics:
        print(f"fit done: {len(trainer.cloud)} splats, "
              f"test psnr {report.final_metrics['psnr']:.2f} dB, "
              f"ssim {report.final_metrics['ssim']:.4f}")
    else:
        print(f"fit done: {len(trainer.cloud)} splats")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_render(args) -> int:
    import numpy as np
    from . import io
    from .checkpoint import load_checkpoint
    from .rasterizer import render

    cloud, appearance, _, _ = load_checkpoint(args.checkpoint)
    cam_path = Path(args.cameras)
    if cam_path.is_dir():
        cam_file = cam_path / f'cameras_{args.split}.txt'
    else:
        cam_file = cam_path
    if not cam_file.exists():
        raise FileNotFoundError(f"no camera file at {cam_file}")
    cams = io.read_cameras(cam_file)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cams):
        ab = None
        if appearance is not None and args.latent == 'mean':
            ab = appearance.mean_transform()
        elif appearance is not None and args.latent == 'train':
            ab = appearance.transform(i)
        img, _ = render(cloud, cam, appearance=ab)
        io.write_png(out / f'{i:04d}.png', img)
    io.write_manifest(out / 'manifest.txt', {
        'command': 'render', 'checkpoint': Path(args.checkpoint).name,
        'cameras': cam_file.name, 'latent': args.latent, 'frames': len(cams),
        'tool_version': TOOL_VERSION})
    print(f"rendered {len(cams)} frames to {out}")
    return 0


def cmd_eval(args) -> int:
    import numpy as np
    from . import io
    from .checkpoint import load_checkpoint, load_dumped_masks
    from .datagen import eval_masks, metrics
    from .rasterizer import render

    cloud, appearance, _, _ = load_checkpoint(args.checkpoint)
    dataset = io.load_dataset(args.dataset)
    ab = appearance.mean_transform() if appearance is not None else None

    rows = []
    psnrs, ssims = [], []
    for i, (img, cam) in enumerate(zip(dataset.test_images, dataset.test_cams)):
        rendered, _ = render(cloud, cam, appearance=ab)
        psnr, ssim = metrics(rendered, img)
        psnrs.append(psnr)
        ssims.append(ssim)
        rows.append((f'test_{i:04d}', f'{psnr:.4f}', f'{ssim:.6f}', ''))

    dumped = load_dumped_masks(args.checkpoint)
    have_iou = dumped is not None and dataset.gt_masks is not None
    mean_iou = None
    if have_iou:
        ious, mean_iou = eval_masks(dumped, dataset.gt_masks)
        for i, iou in enumerate(ious):
            rows.append((f'train_{i:04d}', '', '', f'{iou:.6f}'))

    header = ['frame_id', 'psnr_db', 'ssim'] + (['mask_iou'] if have_iou else [])
    mean_row = ['mean', f'{np.mean(psnrs):.4f}', f'{np.mean(ssims):.6f}']
    if have_iou:
        mean_row.append(f'{mean_iou:.6f}')
    lines = [','.join(header)]
    for r in rows:
        lines.append(','.join(r[:len(header)]))
    lines.append(','.join(mean_row))

    out_csv = Path(args.out) if args.out else Path(args.checkpoint) / 'eval.csv'
    out_csv.write_text('\n'.join(lines) + '\n')
    print('\n'.join(lines))
    print(f"metrics written to {out_csv}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error('--threads must be >= 1')
    _set_threads(args.threads)
    handlers = {'gen': cmd_gen, 'fit': cmd_fit, 'render': cmd_render,
                'eval': cmd_eval}
    try:
        return handlers[args.command](args)
    except (FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
