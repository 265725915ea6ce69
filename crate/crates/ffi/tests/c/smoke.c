#include <stdio.h>
#include <string.h>

#include "mxrun.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            const char *msg = mx_last_error_message();                \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__,   \
                    #cond, msg ? msg : "no message");                 \
            return 1;                                                 \
        }                                                             \
    } while (0)

static int32_t body(void *user_data, const MxTask *task, MxBuffer *payload) {
    char x[32];
    size_t needed = 0;
    (void)user_data;
    if (mx_task_get(task, "x", x, sizeof x, &needed) != MX_STATUS_OK) {
        return 2;
    }
    return mx_buffer_write(payload, (const uint8_t *)x, strlen(x)) == MX_STATUS_OK ? 0 : 3;
}

int main(int argc, char **argv) {
    MxConfig *config = NULL;
    MxPlan *plan = NULL;
    MxReport *report = NULL;
    MxCounts counts;
    char key[65];
    const uint8_t *data = NULL;
    size_t len = 0;

    CHECK(argc == 2);
    CHECK(mx_config_parse("[parameters]\nx = [10, 20]\n", &config) == MX_STATUS_OK);
    CHECK(mx_config_validate(config, NULL, NULL) == MX_STATUS_OK);
    CHECK(mx_plan_expand(config, &plan) == MX_STATUS_OK);
    CHECK(mx_plan_len(plan) == 2);
    CHECK(mx_plan_task_key(plan, 1, key) == MX_STATUS_OK);
    CHECK(strlen(key) == 64);

    MxRunOptions opts = mx_run_options_default();
    opts.jobs = 1;
    CHECK(mx_run_callback(plan, body, NULL, argv[1], &opts, &report) == MX_STATUS_OK);
    CHECK(mx_report_counts(report, &counts) == MX_STATUS_OK);
    CHECK(counts.succeeded == 2 && counts.failed == 0);
    CHECK(mx_report_payload(report, 1, &data, &len) == MX_STATUS_OK);
    CHECK(len == 2 && memcmp(data, "20", 2) == 0);

    CHECK(mx_plan_task_key(plan, 9, key) == MX_STATUS_OUT_OF_RANGE);
    CHECK(mx_last_error_message() != NULL);

    mx_report_free(report);
    mx_plan_free(plan);
    mx_config_free(config);
    printf("mxrun %s ok\n", mx_version());
    return 0;
}
