/*
 * One object per mapping, one unmapped guard page after every object, and no
 * in-place metadata. Bookkeeping lives in a private table, so no heap bug can
 * reach it through object memory. Freed mappings are unmapped and their
 * addresses are never handed out again.
 */
#include <errno.h>
#include <stddef.h>
#include <stdint.h>
#include <string.h>
#include <sys/mman.h>

#define PAGE ((size_t)4096)
#define PAGE_HINT ((uintptr_t)0x180000000000UL)
#define MAX_OBJECTS 8192
#define MAX_REQUEST ((size_t)1 << 30)

struct object {
    uintptr_t addr;
    size_t len;
    int live;
};

static struct object table[MAX_OBJECTS];
static size_t nobjects;
static uintptr_t next_hint = PAGE_HINT;

static struct object *lookup(void *p)
{
    size_t i;

    for (i = nobjects; i > 0; i--) {
        if (table[i - 1].addr == (uintptr_t)p)
            return &table[i - 1];
    }
    return NULL;
}

static void *page_malloc(size_t n)
{
    size_t len;
    void *mem;

    if (n > MAX_REQUEST || nobjects == MAX_OBJECTS)
        return NULL;
    len = n == 0 ? PAGE : (n + PAGE - 1) & ~(PAGE - 1);
    mem = mmap((void *)next_hint, len, PROT_READ | PROT_WRITE,
               MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
    if (mem == MAP_FAILED)
        return NULL;
    next_hint = (uintptr_t)mem + len + PAGE;
    table[nobjects].addr = (uintptr_t)mem;
    table[nobjects].len = len;
    table[nobjects].live = 1;
    nobjects++;
    return mem;
}

static void page_free(void *p)
{
    struct object *o;

    if (!p)
        return;
    o = lookup(p);
    if (!o || !o->live)
        return;
    munmap((void *)o->addr, o->len);
    o->live = 0;
}

static size_t page_usable(void *p)
{
    struct object *o = p ? lookup(p) : NULL;

    return o && o->live ? o->len : 0;
}

void *malloc(size_t n)
{
    return page_malloc(n);
}

void free(void *p)
{
    page_free(p);
}

size_t malloc_usable_size(void *p)
{
    return page_usable(p);
}

void *calloc(size_t n, size_t m)
{
    if (m && n > (size_t)-1 / m)
        return NULL;
    return page_malloc(n * m);
}

void *realloc(void *old, size_t n)
{
    void *p;
    size_t keep;

    if (!old)
        return page_malloc(n);
    p = page_malloc(n);
    if (!p)
        return NULL;
    keep = page_usable(old);
    memcpy(p, old, keep < n ? keep : n);
    page_free(old);
    return p;
}

void *memalign(size_t align, size_t n)
{
    if (align > PAGE) {
        errno = ENOMEM;
        return NULL;
    }
    return page_malloc(n);
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
