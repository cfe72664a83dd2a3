from setuptools import setup, Command

import os


# Class for clean command
class Cleaner(Command):
    """Clean command to tidy up after building"""
    user_options = []
    def initialize_options(self):
        pass
    def finalize_options(self):
        pass
    def run(self):
        os.system("rm -vrf ./build ./dist ./*pyc ./*egg-info")


# Version is a static string; read it without importing the package (torch)
version = {}
with open(os.path.join("floodcast", "_version.py")) as f:
    exec(f.read(), version)

# Install
setup(
    name="floodcast",
    version=version["__version__"],
    packages=["floodcast", "floodcast.layers"],
    cmdclass={"clean": Cleaner},
    python_requires=">=3.10",
    install_requires=["torch>=2.0", "numpy", "scipy", "pandas", "shapely>=2.0", "tomli; python_version<'3.11'"],
    entry_points={"console_scripts": ["floodcast = floodcast.cli:main"]},
)
