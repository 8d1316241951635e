from setuptools import setup

setup(
    name="paged-attention-bench",
    version="0.1.0",
    description="CPU reference engine for paged attention kernels, with a benchmark sweep and a decision-tree tuner",
    py_modules=[
        "attention_bench",
        "config",
        "core",
        "kernels",
        "kvcache",
        "plot_bench",
        "scenario_gen",
        "softmax_core",
        "tuner",
    ],
    install_requires=[
        "numpy>=2.0.0",
        "pandas>=2.3.0",
        "plotly>=6.2.0",
        "scikit-learn>=1.3.0",
        "python-dotenv>=1.1.0",
    ],
    extras_require={"test": ["pytest>=8.0.0", "hypothesis>=6.100.0"]},
    entry_points={
        "console_scripts": [
            "attention-bench=attention_bench:main",
            "attention-bench-plot=plot_bench:main",
        ],
    },
    python_requires=">=3.9",
)
