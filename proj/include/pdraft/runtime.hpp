#pragma once

namespace pdraft {

// Keeps freed tensor buffers in the heap instead of returning them to the OS
// after every op; training otherwise spends a large share of its time in
// mmap/munmap. No-op outside glibc.
void configure_allocator();

}  // namespace pdraft
