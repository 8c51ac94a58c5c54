from setuptools import setup, find_packages

setup(
    name="rhflow",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "pyyaml>=6.0",
        "numpy>=1.21.0",
        "scipy>=1.12",
    ],
    entry_points={
        "console_scripts": [
            "rhflow=rhflow.main:cli",
        ],
    },
    python_requires=">=3.9",
)
