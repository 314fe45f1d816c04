# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

import sys

from .cli import main

sys.exit(main())
