int is_open(char c)
{
    return c == '{' || c == '(';
}

int is_quote(char c)
{
    return c == '\'' || c == '"';
}
