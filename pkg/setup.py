"""Build hooks for the optional fused-optimizer C extension.

The extension is a pure speed-up: xdreg.training falls back to an
equivalent (bitwise-identical) numpy implementation when it is absent,
so any build failure here downgrades gracefully instead of blocking the
install.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # missing compiler, unsupported flags, ...
            print(f"warning: skipping optional C accelerator ({exc})")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: skipping optional C accelerator ({exc})")


fastopt = Extension(
    "xdreg._fastopt",
    sources=["src/xdreg/_fastopt.c"],
    # -ffp-contract=off keeps the op-for-op rounding identical to the
    # numpy fallback (no FMA fusion); -fno-math-errno lets sqrtf vectorize.
    extra_compile_args=["-O3", "-march=native", "-ffp-contract=off", "-fno-math-errno"],
)

setup(
    ext_modules=[fastopt],
    cmdclass={"build_ext": OptionalBuildExt},
)
