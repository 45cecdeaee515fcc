/*
 * Bump allocator that logs every entry-point call. Meant to be preloaded over
 * the native allocator: each call appends one line ("malloc <n>", "free",
 * "calloc <n>", "realloc <n>") to the file named by HEAPSCOUT_COUNT_LOG.
 * Memory is never reused.
 */
#include <errno.h>
#include <fcntl.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>
#include <string.h>
#include <sys/mman.h>
#include <unistd.h>

#define POOL_SIZE ((size_t)256 << 20)
#define HEADER ((size_t)16)

static char *pool;
static size_t used;
static int log_fd = -2;

static void log_call(const char *what, size_t n, int with_size)
{
    char line[64];
    char digits[24];
    size_t len = 0, nd = 0;
    ssize_t ignored;

    if (log_fd == -2) {
        const char *path = getenv("HEAPSCOUT_COUNT_LOG");
        log_fd = path ? open(path, O_WRONLY | O_CREAT | O_APPEND, 0644) : -1;
    }
    if (log_fd < 0)
        return;
    while (*what && len < 16)
        line[len++] = *what++;
    if (with_size) {
        line[len++] = ' ';
        do {
            digits[nd++] = (char)('0' + n % 10);
            n /= 10;
        } while (n);
        while (nd)
            line[len++] = digits[--nd];
    }
    line[len++] = '\n';
    ignored = write(log_fd, line, len);
    (void)ignored;
}

static void *bump(size_t n)
{
    size_t need;
    char *p;

    if (!pool) {
        void *mem = mmap(NULL, POOL_SIZE, PROT_READ | PROT_WRITE,
                         MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
        if (mem == MAP_FAILED)
            return NULL;
        pool = mem;
    }
    if (n > POOL_SIZE)
        return NULL;
    need = HEADER + ((n + 15) & ~(size_t)15);
    if (need > POOL_SIZE - used)
        return NULL;
    p = pool + used;
    used += need;
    *(size_t *)p = n;
    return p + HEADER;
}

static size_t recorded(void *p)
{
    return *(size_t *)((char *)p - HEADER);
}

void *malloc(size_t n)
{
    log_call("malloc", n, 1);
    return bump(n);
}

void free(void *p)
{
    log_call("free", 0, 0);
    (void)p;
}

size_t malloc_usable_size(void *p)
{
    return p ? (recorded(p) + 15) & ~(size_t)15 : 0;
}

void *calloc(size_t n, size_t m)
{
    void *p;

    if (m && n > (size_t)-1 / m)
        return NULL;
    log_call("calloc", n * m, 1);
    p = bump(n * m);
    if (p)
        memset(p, 0, n * m);
    return p;
}

void *realloc(void *old, size_t n)
{
    void *p;
    size_t keep;

    log_call("realloc", n, 1);
    p = bump(n);
    if (p && old) {
        keep = recorded(old);
        memcpy(p, old, keep < n ? keep : n);
    }
    return p;
}

void *memalign(size_t align, size_t n)
{
    char *p;

    if (align <= 16)
        return bump(n);
    p = bump(n + align);
    if (!p)
        return NULL;
    p = (char *)(((uintptr_t)p + align - 1) & ~(uintptr_t)(align - 1));
    if ((size_t)(p - pool) >= HEADER)
        *(size_t *)(p - HEADER) = n;
    return p;
}

void *aligned_alloc(size_t align, size_t n)
{
    return memalign(align, n);
}

int posix_memalign(void **out, size_t align, size_t n)
{
    void *p = memalign(align, n);

    if (!p)
        return ENOMEM;
    *out = p;
    return 0;
}
