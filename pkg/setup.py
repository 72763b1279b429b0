from setuptools import setup

setup(
    name="pinnlab",
    version="1.0.0",
    description="Residual-minimization training laboratory for elliptic and parabolic problems",
    py_modules=[
        "autodiff_core",
        "domains",
        "operators_residuals",
        "problems",
        "energies",
        "diagnostics",
        "training",
        "experiment_cli",
    ],
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.22.0",
        "torch>=2.0.0",
        "scipy>=1.9.0",
        "pandas>=1.5.0",
    ],
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "pytest-cov>=4.0.0",
            "black>=22.0.0",
            "mypy>=1.0.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "pinnlab=experiment_cli:cli",
        ],
    },
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
)
