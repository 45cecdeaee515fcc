/*
 * Small dlmalloc-style allocator with in-place boundary tags.
 *
 * Layout mirrors ptmalloc: every chunk starts with prev_size and size words,
 * the low bit of size is PREV_INUSE, and the prev_size of a chunk overlaps
 * the last payload word of the chunk before it. Free chunks <= FAST_MAX sit
 * in per-size singly linked fast bins and are never coalesced; larger free
 * chunks are coalesced with their neighbours and kept in one circular doubly
 * linked unsorted list.
 *
 * Built twice: without REF_CHECKED the unlink is the textbook
 * FD->bk = BK; BK->fd = FD with no validation at all; with REF_CHECKED the
 * allocator validates metadata and aborts with the glibc message of the
 * violated check.
 *
 * Single threaded only. The arena is a fixed 1 MiB mapping that never grows.
 */
#include <errno.h>
#include <stddef.h>
#include <stdint.h>
#include <string.h>
#include <sys/mman.h>
#include <unistd.h>

#define WORD sizeof(size_t)
#define ARENA_SIZE ((size_t)1 << 20)
#define ARENA_HINT ((void *)0x100000000000UL)
#define MINSIZE ((size_t)32)
#define ALIGN_MASK ((size_t)15)
#define PREV_INUSE ((size_t)1)
#define SIZE_BITS ((size_t)7)
#define FAST_MAX ((size_t)128)
#define NFAST (FAST_MAX / 16 + 1)
#define SCAN_LIMIT 4096

struct chunk {
    size_t prev_size;
    size_t size;
    struct chunk *fd;
    struct chunk *bk;
};

static char *arena_lo;
static char *arena_hi;
static struct chunk *top;
static struct chunk *fastbins[NFAST];
static struct chunk unsorted;

#define chunksize(c) ((c)->size & ~SIZE_BITS)
#define chunk_at(p, off) ((struct chunk *)((char *)(p) + (off)))
#define mem2chunk(m) ((struct chunk *)((char *)(m) - 2 * WORD))
#define chunk2mem(c) ((void *)((char *)(c) + 2 * WORD))
#define next_chunk(c) chunk_at(c, chunksize(c))

#ifdef REF_CHECKED
static void die(const char *msg)
{
    ssize_t ignored = write(2, msg, strlen(msg));
    ignored = write(2, "\n", 1);
    (void)ignored;
    __builtin_trap();
}

#define CHECK(cond, msg)                                                       \
    do {                                                                       \
        if (!(cond))                                                           \
            die(msg);                                                          \
    } while (0)
#else
#define CHECK(cond, msg) ((void)0)
#endif

static int arena_init(void)
{
    void *mem;

    if (arena_lo)
        return 1;
    mem = mmap(ARENA_HINT, ARENA_SIZE, PROT_READ | PROT_WRITE,
               MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
    if (mem == MAP_FAILED)
        return 0;
    arena_lo = mem;
    arena_hi = arena_lo + ARENA_SIZE;
    top = (struct chunk *)arena_lo;
    top->prev_size = 0;
    top->size = ARENA_SIZE | PREV_INUSE;
    unsorted.fd = &unsorted;
    unsorted.bk = &unsorted;
    return 1;
}

static int request2size(size_t req, size_t *out)
{
    size_t nb;

    if (req > (size_t)-1 - 2 * MINSIZE)
        return 0;
    nb = (req + WORD + ALIGN_MASK) & ~ALIGN_MASK;
    *out = nb < MINSIZE ? MINSIZE : nb;
    return 1;
}

static void unlink_chunk(struct chunk *p)
{
    struct chunk *fd, *bk;

    CHECK(chunksize(p) == next_chunk(p)->prev_size,
          "corrupted size vs. prev_size");
    fd = p->fd;
    bk = p->bk;
    CHECK(fd->bk == p && bk->fd == p, "corrupted double-linked list");
    fd->bk = bk;
    bk->fd = fd;
}

static void unsorted_insert(struct chunk *c)
{
    struct chunk *fwd = unsorted.fd;

    CHECK(fwd->bk == &unsorted, "free(): corrupted unsorted chunks");
    c->fd = fwd;
    c->bk = &unsorted;
    fwd->bk = c;
    unsorted.fd = c;
}

static void *heap_malloc(size_t req)
{
    struct chunk *victim, *rem;
    size_t nb, size, tsize;
    int scanned = 0;

    if (!arena_init() || !request2size(req, &nb))
        return NULL;

    if (nb <= FAST_MAX) {
        victim = fastbins[nb / 16];
        if (victim) {
            CHECK(chunksize(victim) == nb, "malloc(): memory corruption (fast)");
            fastbins[nb / 16] = victim->fd;
            return chunk2mem(victim);
        }
    }

    for (victim = unsorted.bk; victim != &unsorted && scanned < SCAN_LIMIT;
         victim = victim->bk, scanned++) {
        size = chunksize(victim);
        CHECK(size > 2 * WORD && size <= ARENA_SIZE, "malloc(): memory corruption");
        if (size < nb)
            continue;
        unlink_chunk(victim);
        if (size - nb >= MINSIZE) {
            rem = chunk_at(victim, nb);
            rem->size = (size - nb) | PREV_INUSE;
            next_chunk(rem)->prev_size = size - nb;
            unsorted_insert(rem);
            victim->size = nb | (victim->size & PREV_INUSE);
        } else {
            next_chunk(victim)->size |= PREV_INUSE;
        }
        return chunk2mem(victim);
    }

    tsize = chunksize(top);
    if (tsize < nb || tsize - nb < MINSIZE)
        return NULL;
    victim = top;
    top = chunk_at(victim, nb);
    top->size = (tsize - nb) | PREV_INUSE;
    victim->size = nb | (victim->size & PREV_INUSE);
    return chunk2mem(victim);
}

static void heap_free(void *mem)
{
    struct chunk *c, *next, *prev;
    size_t size, nextsize;

    if (!mem)
        return;
    c = mem2chunk(mem);
    size = chunksize(c);

    CHECK(((uintptr_t)c & ALIGN_MASK) == 0 && (char *)c >= arena_lo &&
              (char *)c < arena_hi && (uintptr_t)c <= (uintptr_t)-size,
          "free(): invalid pointer");
    CHECK(size >= MINSIZE && (size & ALIGN_MASK) == 0, "free(): invalid size");

    if (size <= FAST_MAX) {
#ifdef REF_CHECKED
        nextsize = chunksize(next_chunk(c));
        CHECK(nextsize > 2 * WORD && nextsize < ARENA_SIZE,
              "free(): invalid next size (fast)");
        CHECK(fastbins[size / 16] != c, "double free or corruption (fasttop)");
#endif
        c->fd = fastbins[size / 16];
        fastbins[size / 16] = c;
        return;
    }

    CHECK(c != top, "double free or corruption (top)");
    next = chunk_at(c, size);
    CHECK((char *)next < arena_hi, "double free or corruption (out)");
    CHECK(next->size & PREV_INUSE, "double free or corruption (!prev)");
    nextsize = chunksize(next);
    CHECK(nextsize > 2 * WORD && nextsize < ARENA_SIZE,
          "free(): invalid next size (normal)");

    if (!(c->size & PREV_INUSE)) {
        prev = chunk_at(c, -(ptrdiff_t)c->prev_size);
        size += c->prev_size;
        c = prev;
        unlink_chunk(c);
    }

    if (next != top) {
        if (!(next_chunk(next)->size & PREV_INUSE)) {
            unlink_chunk(next);
            size += nextsize;
        } else {
            next->size &= ~PREV_INUSE;
        }
        c->size = size | PREV_INUSE;
        chunk_at(c, size)->prev_size = size;
        unsorted_insert(c);
    } else {
        size += chunksize(top);
        c->size = size | PREV_INUSE;
        top = c;
    }
}

static size_t heap_usable(void *mem)
{
    if (!mem)
        return 0;
    return chunksize(mem2chunk(mem)) - WORD;
}

void *malloc(size_t n)
{
    return heap_malloc(n);
}

void free(void *p)
{
    heap_free(p);
}

size_t malloc_usable_size(void *p)
{
    return heap_usable(p);
}

void *calloc(size_t n, size_t m)
{
    void *p;

    if (m && n > (size_t)-1 / m)
        return NULL;
    p = heap_malloc(n * m);
    if (p)
        memset(p, 0, heap_usable(p));
    return p;
}

void *realloc(void *old, size_t n)
{
    void *p;
    size_t keep;

    if (!old)
        return heap_malloc(n);
    p = heap_malloc(n);
    if (!p)
        return NULL;
    keep = heap_usable(old);
    memcpy(p, old, keep < n ? keep : n);
    heap_free(old);
    return p;
}

void *memalign(size_t align, size_t n)
{
    if (align > 16) {
        errno = ENOMEM;
        return NULL;
    }
    return heap_malloc(n);
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
