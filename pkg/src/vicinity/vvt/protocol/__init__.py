# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors
