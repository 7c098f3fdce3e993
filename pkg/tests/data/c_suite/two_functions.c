int first(int a)
{
    return a * 2;
}

struct pair { int a; int b; };

int second(int b) {
    return b + 1;
}
