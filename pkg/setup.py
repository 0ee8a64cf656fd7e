from setuptools import find_packages, setup

VERSION = "0.1"
DESCRIPTION = (
    "Digital twin of a TDC power side-channel detector for adversarial attacks "
    "on int8 CNN accelerators"
)

setup(
    name="tdc_detector",
    version=VERSION,
    description=DESCRIPTION,
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    install_requires=[
        "numpy>=2",
        "scipy",
        "matplotlib",
        "pandas",
        "joblib",
        "tqdm",
        "dill",
    ],
    entry_points={"console_scripts": ["tdc-detector=tdc_detector.cli:main"]},
    include_package_data=True,
)
