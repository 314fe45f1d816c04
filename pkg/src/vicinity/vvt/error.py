# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

class GridError(RuntimeError):
    def __init__(self, message: str):
        self.msg = message
        super().__init__(message)

class UnsupportedModeError(RuntimeError):
    def __init__(self, message: str):
        self.msg = message
        super().__init__(message)

class CapacityError(RuntimeError):
    def __init__(self, message: str):
        self.msg = message
        super().__init__(message)

class ConfigError(RuntimeError):
    def __init__(self, message: str):
        self.msg = message
        super().__init__(message)

class DatasetError(RuntimeError):
    def __init__(self, message: str):
        self.msg = message
        super().__init__(message)

class CheckpointError(RuntimeError):
    def __init__(self, message: str):
        self.msg = message
        super().__init__(message)

class DivergenceError(RuntimeError):
    def __init__(self, message: str):
        self.msg = message
        super().__init__(message)
