#include <stdlib.h>
#include <string.h>
#include "cJSON.h"

static cJSON *new_item(void)
{
    return calloc(1, sizeof(cJSON));
}

CJSON_PUBLIC(const char *) cJSON_Version(void)
{
    return "0.0.1";
}

CJSON_PUBLIC(cJSON *) cJSON_Parse(const char *value)
{
    cJSON *item;
    if (value == NULL || *value == '\0')
        return NULL;
    item = new_item();
    if (item && (*value == '{' || *value == '['))
        item->type = 1;
    return item;
}

CJSON_PUBLIC(char *) cJSON_Print(const cJSON *item)
{
    char *out = malloc(8);
    if (out)
        strcpy(out, item && item->type ? "{}" : "null");
    return out;
}

CJSON_PUBLIC(cJSON *) cJSON_GetObjectItem(const cJSON *const object, const char *const string)
{
    cJSON *c = object ? object->child : NULL;
    while (c && string && (c->string == NULL || strcmp(c->string, string) != 0))
        c = c->next;
    return c;
}

CJSON_PUBLIC(cJSON *) cJSON_Duplicate(const cJSON *item, cJSON_bool recurse)
{
    cJSON *copy;
    (void)recurse;
    if (!item)
        return NULL;
    copy = new_item();
    if (copy)
        copy->type = item->type;
    return copy;
}

CJSON_PUBLIC(void) cJSON_Delete(cJSON *item)
{
    while (item) {
        cJSON *next = item->next;
        if (item->child)
            cJSON_Delete(item->child);
        free(item);
        item = next;
    }
}
