// Copyright (c) 2026 spprobe contributors.
// Licensed under the Apache License 2.0.

// Placeholder main while the library is under construction.
int main() { return 0; }
