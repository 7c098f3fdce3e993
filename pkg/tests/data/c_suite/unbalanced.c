int good(void)
{
    return 1;
}

int bad(void)
{
    if (1) {
        return 2;
