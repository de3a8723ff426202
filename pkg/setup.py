#!/usr/bin/env python
#
# fcnn: fully-convolutional crowd segmentation from scratch on `numpy`
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.

# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <http://www.gnu.org/licenses/>.
from setuptools import setup

with open('README.rst', encoding='utf-8') as f:
    readme = f.read()


setup(
    name="fcnn",
    version='0.1.0.alpha0',
    description='Fully-convolutional crowd segmentation built on `numpy` and `trio`',
    long_description=readme,
    license='GPLv3',
    platforms=['linux', 'windows'],
    packages=[
        'fcnn',
        'fcnn.testing',
    ],
    install_requires=[
        'numpy>=1.20', 'Pillow', 'msgpack', 'trio>=0.22', 'async_generator',
        'colorlog', 'wrapt',
    ],
    tests_require=['pytest', 'pytest-trio'],
    entry_points={
        'console_scripts': [
            'fcnn = fcnn._cli:main',
        ],
    },
    python_requires=">=3.9",
    keywords=[
        "segmentation", "fully convolutional", "crowd", "numpy",
        'backpropagation', 'trio'
    ],
    classifiers=[
        'Development Status :: 3 - Alpha',
        'License :: OSI Approved :: GNU General Public License v3 or later (GPLv3+)',
        'Operating System :: POSIX :: Linux',
        "Programming Language :: Python :: Implementation :: CPython",
        "Programming Language :: Python :: 3 :: Only",
        "Programming Language :: Python :: 3.9",
        "Intended Audience :: Science/Research",
        "Intended Audience :: Developers",
        "Topic :: Scientific/Engineering :: Image Recognition",
    ],
)
